"""``ppt`` command line: gen-data, pretrain, tune, ablate, uq-compare, report.

All commands share one output root (``--out``, else ``$PPT_OUT_DIR``, else
``./ppt-out``); each stage writes to its own subdirectory together with a
``manifest.json`` holding the resolved config and SHA-256 of every input
and artifact. Exit codes: 0 success, 1 invalid configuration or missing
input, 2 runtime or training failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import config as config_mod
from .datagen import (EvolutionPair, builtin_system, generate_ads_dataset, generate_elevator_dataset,
                      load_dataset, pretraining_systems, save_dataset, split_dataset)
from .errors import ConfigurationError, NumericalError, ParseError, TrainingError
from .evaluation import (Evolution, emit_report, experiment_from_dict, experiment_to_dict, merge_experiments,
                         run_experiment, uq_comparison_row)
from .schemas import validate_summary

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
STAGES = {"gen-data": "data", "pretrain": "pretrain", "tune": "tune", "ablate": "ablate",
          "uq-compare": "uq", "report": "report"}


class MissingInput(ConfigurationError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: dict, inputs: list[Path], root: Path) -> None:
    def rel(p: Path) -> str:
        try:
            return p.resolve().relative_to(root.resolve()).as_posix()
        except ValueError:
            return str(p)
    artifacts = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "config": cfg,
        "inputs": {rel(p): _sha256(p) for p in sorted(set(inputs))},
        "artifacts": {p.relative_to(out).as_posix(): _sha256(p) for p in artifacts},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _generate(domain: str, system, n: int, seed: int):
    if domain == "ads":
        return generate_ads_dataset(system, n, seed)
    return generate_elevator_dataset(system, n, seed)


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingInput(f"missing input: {path}")
    return path


def _data_dir(cfg: dict, root: Path) -> Path:
    return Path(cfg["data_dir"]) if cfg["data_dir"] else root / "data"


def _checkpoint(cfg: dict, root: Path) -> Path:
    return Path(cfg["checkpoint"]) if cfg["checkpoint"] else root / "pretrain" / "pretrained.pt"


def _label(cfg: dict) -> str:
    return f"{cfg['source_system']}→{cfg['target_system']}"


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_gen_data(cfg: dict, out: Path, root: Path) -> list[Path]:
    seed = cfg["seed"]
    sd, src_sys = builtin_system(cfg["source_system"])
    td, tgt_sys = builtin_system(cfg["target_system"])
    if sd != cfg["domain"] or td != cfg["domain"]:
        raise ConfigurationError(f"systems {cfg['source_system']}/{cfg['target_system']} "
                                 f"are not both {cfg['domain']} systems")
    save_dataset(_generate(sd, src_sys, cfg["n_source"], seed + 1), out / "source.csv")
    tgt = _generate(td, tgt_sys, cfg["n_target"] + cfg["n_test"], seed + 2)
    train, test = split_dataset(tgt, cfg["n_target"])
    save_dataset(train, out / "target.csv")
    save_dataset(test, out / "test.csv")
    for k, (a, b) in enumerate(pretraining_systems(cfg["domain"], cfg["n_pretrain_pairs"], seed + 3)):
        save_dataset(_generate(cfg["domain"], a, cfg["n_pretrain_source"], seed + 100 + 2 * k),
                     out / f"pretrain_{k}_source.csv")
        save_dataset(_generate(cfg["domain"], b, cfg["n_pretrain_target"], seed + 101 + 2 * k),
                     out / f"pretrain_{k}_target.csv")
    return []


def _pretrain_pairs(cfg: dict, root: Path) -> tuple[list[EvolutionPair], list[Path]]:
    data = _data_dir(cfg, root)
    pairs, inputs = [], []
    for k in range(cfg["n_pretrain_pairs"]):
        s, t = _need(data / f"pretrain_{k}_source.csv"), _need(data / f"pretrain_{k}_target.csv")
        pairs.append(EvolutionPair(load_dataset(s), load_dataset(t), f"pretrain {k}"))
        inputs += [s, t]
    return pairs, inputs


def _evolution(cfg: dict, root: Path) -> tuple[Evolution, list[Path]]:
    data = _data_dir(cfg, root)
    paths = [_need(data / f"{n}.csv") for n in ("source", "target", "test")]
    s, t, te = (load_dataset(p) for p in paths)
    return Evolution(_label(cfg), s, t, te), paths


def cmd_pretrain(cfg: dict, out: Path, root: Path) -> list[Path]:
    from .training import pretrain
    from .transfer import save_checkpoint

    model_cfg, uq, flags = config_mod.build(cfg)
    pairs, inputs = _pretrain_pairs(cfg, root)
    res = pretrain(pairs, model_cfg, uq, cfg["seed"], flags, _clock(cfg))
    for k, rec in enumerate(res.records):
        rec.to_csv(out / f"pretrain_record_{k}.csv")
    save_checkpoint(res.model, out / "pretrained.pt", {
        "time_s": res.time_s, "pair_times_s": res.pair_times, "uq_time_s": res.uq_time_s,
        "use_uq": flags.use_uq, "seed": cfg["seed"]})
    return inputs


def _clock(cfg: dict):
    from .clock import make_clock
    return make_clock(cfg["clock"])


def _load_pretrained(cfg: dict, root: Path, model_cfg) -> tuple[dict, dict, Path]:
    from .transfer import load_checkpoint
    import torch

    path = _need(_checkpoint(cfg, root))
    model = load_checkpoint(path, model_cfg)
    extra = torch.load(path, map_location="cpu", weights_only=True).get("extra", {})
    key = "uq" if extra.get("use_uq", True) else "no_uq"
    timing = {f"pretrain_{key}": {k: extra[k] for k in ("time_s", "pair_times_s", "uq_time_s") if k in extra}}
    return {key: model}, timing, path


def _save_experiment(exp, out: Path, report: bool) -> None:
    (out / "records.json").write_text(json.dumps(experiment_to_dict(exp), indent=2) + "\n", encoding="utf-8")
    if report:
        emit_report(exp, out)
        validate_summary(json.loads((out / "summary.json").read_text(encoding="utf-8")))


def cmd_tune(cfg: dict, out: Path, root: Path) -> list[Path]:
    model_cfg, uq, flags = config_mod.build(cfg)
    pretrained, timing, ckpt = _load_pretrained(cfg, root, model_cfg)
    evo, inputs = _evolution(cfg, root)
    exp = run_experiment([evo], [], model_cfg, uq, ["PPT", "FINETUNE"], cfg["repeats"], cfg["seed"], flags,
                         clock=cfg["clock"], jobs=cfg["jobs"], pretrained=pretrained)
    exp.timing.update(timing)
    _save_experiment(exp, out, report=True)
    return inputs + [ckpt]


def cmd_ablate(cfg: dict, out: Path, root: Path) -> list[Path]:
    model_cfg, uq, flags = config_mod.build(cfg)
    evo, inputs = _evolution(cfg, root)
    pairs, more = _pretrain_pairs(cfg, root)
    pretrained, timing = {}, {}
    if cfg["checkpoint"]:
        pretrained, timing, ckpt = _load_pretrained(cfg, root, model_cfg)
        more.append(ckpt)
    exp = run_experiment([evo], pairs, model_cfg, uq, cfg["variants"], cfg["repeats"], cfg["seed"], flags,
                         cfg["uq_methods"], cfg["clock"], cfg["jobs"], pretrained)
    exp.timing.update(timing)
    _save_experiment(exp, out, report=True)
    return inputs + more


def cmd_uq_compare(cfg: dict, out: Path, root: Path) -> list[Path]:
    from .uq import compare_methods, export_scores

    model_cfg, uq, flags = config_mod.build(cfg)
    evo, inputs = _evolution(cfg, root)
    pretrained, timing = {}, {}
    ckpt = _checkpoint(cfg, root)
    if ckpt.exists():
        pretrained, timing, _ = _load_pretrained(cfg, root, model_cfg)
        inputs.append(ckpt)
        pairs = []
    else:
        pairs, more = _pretrain_pairs(cfg, root)
        inputs += more
    exp = run_experiment([evo], pairs, model_cfg, uq, ["PPT"], cfg["repeats"], cfg["seed"], flags,
                         ["cs", "bayesian", "ensemble"], cfg["clock"], cfg["jobs"], pretrained)
    exp.timing.update(timing)
    ks = tuple(cfg["precision_ks"])
    cmp = compare_methods(evo.target, uq, model_cfg, cfg["seed"], ks, _clock(cfg))
    exp.uq.append(uq_comparison_row(evo, uq, model_cfg, cfg["seed"], ks, cfg["clock"], exp.records, cmp))
    _save_experiment(exp, out, report=True)
    K = uq.effective_k(len(evo.target))
    for method, scores in cmp["scores"].items():
        export_scores(scores, K, out / f"scores_{method}.csv")
    return inputs


def cmd_report(cfg: dict, out: Path, root: Path, inputs: list[str] | None) -> list[Path]:
    dirs = [Path(p) for p in inputs] if inputs else [root / s for s in ("tune", "ablate", "uq")
                                                      if (root / s / "records.json").exists()]
    if not dirs:
        raise MissingInput(f"missing input: no records.json under {root}/tune, {root}/ablate or {root}/uq")
    files = [_need(d / "records.json" if d.is_dir() else d) for d in dirs]
    parts = []
    for f in files:
        try:
            parts.append(experiment_from_dict(json.loads(f.read_text(encoding="utf-8")), cfg["uq_method"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ParseError(f"{f}: not a records file ({exc})") from None
    exp = merge_experiments(parts, cfg["uq_method"])
    if not exp.records:
        raise ConfigurationError("no run records to report")
    emit_report(exp, out)
    validate_summary(json.loads((out / "summary.json").read_text(encoding="utf-8")))
    return files


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--jobs", type=int, help="parallel worker processes")
    common.add_argument("--out", metavar="DIR", help="output root (default $PPT_OUT_DIR or ./ppt-out)")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override one config key (repeatable)")
    parser = argparse.ArgumentParser(prog="ppt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("gen-data", "generate source, target, test and pretraining datasets"),
                       ("pretrain", "pretrain source and target twins on the synthetic pairs"),
                       ("tune", "prompt-tune (and fine-tune as baseline) on the evolution pair"),
                       ("ablate", "run the variant matrix and write the report"),
                       ("uq-compare", "compare CS, Bayesian and ensemble selection"),
                       ("report", "merge records.json files into one report")]:
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "report":
            p.add_argument("--in", dest="inputs", action="append", metavar="PATH",
                           help="stage directory or records.json (repeatable)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_cfg = config_mod.load_file(args.config) if args.config else {}
        overrides = dict(config_mod.parse_override(s) for s in args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.jobs is not None:
            overrides["jobs"] = args.jobs
        cfg = config_mod.resolve(file_cfg, overrides)
        root = Path(args.out or os.environ.get("PPT_OUT_DIR") or "ppt-out")
        out = root / STAGES[args.command]
        handler = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "tune": cmd_tune, "ablate": cmd_ablate,
                   "uq-compare": cmd_uq_compare}.get(args.command)
        # check inputs before creating anything
        if args.command in ("pretrain", "ablate"):
            _pretrain_pairs(cfg, root)
        if args.command in ("tune", "ablate", "uq-compare"):
            _evolution(cfg, root)
        if args.command == "tune":
            _need(_checkpoint(cfg, root))
        out.mkdir(parents=True, exist_ok=True)
        if handler is None:
            inputs = cmd_report(cfg, out, root, args.inputs)
        else:
            inputs = handler(cfg, out, root)
        _write_manifest(out, args.command, cfg, inputs, root)
    except (ConfigurationError, ParseError, FileNotFoundError) as exc:
        print(f"ppt {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, NumericalError, RuntimeError, OSError, ValueError) as exc:
        print(f"ppt {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
