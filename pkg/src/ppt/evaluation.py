"""Huber evaluation, Mann-Whitney U, Vargha-Delaney A12, repeated-run
experiments and report files (results.csv, summary.json, SVG loss curves)."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .clock import make_clock
from .datagen import Dataset, EvolutionPair
from .errors import TrainingError
from .training import Flags, TrainRecord, fine_tune, huber, new_model, pretrain, prompt_tune
from .twin import ModelConfig
from .uq import UQConfig, compare_methods, select_samples

SIGNIFICANCE = 0.01
VARIANTS = ("PPT", "W_O_TL", "W_O_UQ", "W_O_PT", "FINETUNE")
EFFECT_LABELS = ("NEGLIGIBLE", "SMALL", "MEDIUM", "LARGE")
RESULT_COLUMNS = ("evolution", "variant", "uq_method", "seed", "target_huber",
                  "convergence_time_s", "uq_wall_time_s", "status")
SUMMARY_FORMAT = "ppt-summary/1"


# --------------------------------------------------------------------------
# Statistics
# --------------------------------------------------------------------------

def evaluate(tdt, test: Dataset, delta: float = 1.0) -> float:
    """Mean Huber loss (seconds) of ``tdt`` over every window of ``test``."""
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = tdt.predict_tte(test)
    return float(np.mean(huber(test.tte, pred, delta)))


def _nonempty(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    return a, b


def a12(a, b) -> float:
    """P(A > B) + 0.5 P(A = B) by exhaustive pair count."""
    a, b = _nonempty(a, b)
    diff = a[:, None] - b[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def classify_effect(value: float) -> str:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"A12 must lie in [0, 1], got {value}")
    m = max(value, 1.0 - value)
    if m < 0.56:
        return "NEGLIGIBLE"
    if m < 0.64:
        return "SMALL"
    if m < 0.71:
        return "MEDIUM"
    return "LARGE"


@lru_cache(maxsize=None)
def _u_counts(n1: int, n2: int) -> tuple[int, ...]:
    """Number of rank arrangements giving each U in 0..n1*n2 (no ties)."""
    if n1 == 0 or n2 == 0:
        return (1,)
    out = [0] * (n1 * n2 + 1)
    # the largest observation is either from sample 1 (adds n2 to U) or from sample 2
    for u, c in enumerate(_u_counts(n1 - 1, n2)):
        out[u + n2] += c
    for u, c in enumerate(_u_counts(n1, n2 - 1)):
        out[u] += c
    return tuple(out)


def mann_whitney(a, b) -> tuple[float, float]:
    """``(U_a, p)`` for the two-sided Mann-Whitney U test.

    ``U_a`` counts pairs where ``a`` wins (ties count half). The p-value is
    exact when both samples have at most 20 values and there are no ties;
    otherwise it uses the normal approximation with tie and continuity
    corrections.
    """
    a, b = _nonempty(a, b)
    n1, n2 = a.size, b.size
    ranks = stats.rankdata(np.concatenate([a, b]))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    tied = np.unique(ranks).size < ranks.size
    if not tied and n1 <= 20 and n2 <= 20:
        counts = np.asarray(_u_counts(n1, n2), dtype=float)
        total = counts.sum()
        k = int(round(u))
        lower, upper = counts[:k + 1].sum() / total, counts[k:].sum() / total
        return u, float(min(1.0, 2.0 * min(lower, upper)))
    n = n1 + n2
    _, t = np.unique(ranks, return_counts=True)
    var = n1 * n2 / 12.0 * ((n + 1) - (t ** 3 - t).sum() / (n * (n - 1)))
    if var <= 0:
        return u, 1.0
    z = max(abs(u - n1 * n2 / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return u, float(min(1.0, 2.0 * stats.norm.sf(z)))


@dataclass(frozen=True)
class StatReport:
    u_statistic: float
    p_value: float
    a12: float
    significant: bool
    effect_label: str

    @classmethod
    def compare(cls, a, b) -> "StatReport":
        u, p = mann_whitney(a, b)
        v = a12(a, b)
        return cls(u, p, v, p < SIGNIFICANCE, classify_effect(v))

    def to_dict(self) -> dict:
        return {"u_statistic": self.u_statistic, "p_value": self.p_value, "a12": self.a12,
                "significant": self.significant, "effect_label": self.effect_label,
                "direction": "up" if self.a12 > 0.5 else "down" if self.a12 < 0.5 else "none"}


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Evolution:
    """Source data, target training stream and held-out target data."""

    label: str
    source: Dataset
    target: Dataset
    test: Dataset

    @property
    def pair(self) -> EvolutionPair:
        return EvolutionPair(self.source, self.target, self.label)


@dataclass
class RunRecord:
    evolution: str
    variant: str
    uq_method: str
    seed: int
    target_huber: float | None
    convergence_time_s: float | None
    uq_wall_time_s: float
    status: str = "ok"
    record: TrainRecord | None = field(default=None, repr=False)


@dataclass
class Experiment:
    records: list[RunRecord]
    reports: dict  # evolution -> variant -> StatReport (variant vs PPT)
    timing: dict
    uq: list[dict] = field(default_factory=list)


def _variant_flags(variant: str, base: Flags) -> Flags:
    if variant == "PPT":
        return base
    if variant == "W_O_TL":
        return replace(base, use_tl=False)
    if variant == "W_O_UQ":
        return replace(base, use_uq=False)
    if variant in ("W_O_PT", "FINETUNE"):
        return replace(base, use_pt=False, beta=0.0)
    raise ValueError(f"unknown variant {variant!r}")


def _run_unit(evo: Evolution, seed: int, cells: list[tuple[str, str]], pretrained: dict, cfg: ModelConfig,
              uq: UQConfig, base: Flags, clock_kind: str) -> list[RunRecord]:
    """Every (variant, uq_method) cell of one evolution for one seed."""
    import torch

    torch.set_num_threads(1)
    selections: dict[tuple, object] = {}
    out = []
    for variant, method in cells:
        clock = make_clock(clock_kind)
        flags = _variant_flags(variant, base)
        uq_m = replace(uq, method=method)
        try:
            key = (method, flags.use_uq)
            if key not in selections:
                sel_clock = make_clock(clock_kind)
                selections[key] = (select_samples(evo.source, uq_m, cfg, seed, flags.use_uq, sel_clock),
                                   select_samples(evo.target, uq_m, cfg, seed, flags.use_uq, sel_clock))
            sels = selections[key]
            if variant == "W_O_TL":
                start = new_model(cfg, seed, evo.target)
            else:
                start = pretrained["no_uq" if variant == "W_O_UQ" else "uq"]
            tune = fine_tune if variant == "FINETUNE" else prompt_tune
            res = tune(start, evo.pair, cfg, uq_m, seed, flags, clock, sels)
            out.append(RunRecord(evo.label, variant, method, seed, evaluate(res.model.tdt, evo.test, base.delta),
                                 res.time_s, res.uq_time_s, "ok", res.record))
        except TrainingError as exc:
            out.append(RunRecord(evo.label, variant, method, seed, None, None, 0.0,
                                 "failed: " + str(exc).replace("\n", " ")))
    return out


def run_experiment(evolutions: Sequence[Evolution], pretrain_pairs: Sequence[EvolutionPair], cfg: ModelConfig,
                   uq: UQConfig, variants: Sequence[str] = VARIANTS, repeats: int = 30, base_seed: int = 0,
                   flags: Flags = Flags(), uq_methods: Sequence[str] | None = None, clock: str = "wall",
                   jobs: int = 1, pretrained: dict | None = None) -> Experiment:
    """Run every (evolution, variant) cell with seeds ``base_seed .. base_seed + repeats - 1``.

    Pretraining runs once per experiment with ``base_seed``; ``W_O_UQ`` gets
    its own pretraining without UQ selection. ``uq_methods`` repeats the PPT
    cell once per extra UQ method.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants {sorted(unknown)}")
    variants = [v for v in VARIANTS if v in variants]
    methods = list(dict.fromkeys([uq.method, *(uq_methods or ())]))
    cells = [(v, uq.method) for v in variants]
    cells += [("PPT", m) for m in methods if m != uq.method and "PPT" in variants]

    timing: dict = {}
    pretrained = dict(pretrained or {})
    needs = {"uq"} if any(v != "W_O_UQ" and v != "W_O_TL" for v in variants) else set()
    if "W_O_UQ" in variants:
        needs.add("no_uq")
    for key in sorted(needs - set(pretrained)):
        res = pretrain(pretrain_pairs, cfg, uq, base_seed, replace(flags, use_uq=(key == "uq")),
                       make_clock(clock))
        pretrained[key] = res.model
        timing[f"pretrain_{key}"] = {"time_s": res.time_s, "pair_times_s": res.pair_times,
                                     "uq_time_s": res.uq_time_s}

    units = [(evo, base_seed + r) for evo in evolutions for r in range(repeats)]
    args = [(evo, seed, cells, pretrained, cfg, uq, flags, clock) for evo, seed in units]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_unit, *zip(*args)))
    else:
        chunks = [_run_unit(*a) for a in args]
    records = [r for chunk in chunks for r in chunk]
    order = {(v, m): k for k, (v, m) in enumerate(cells)}
    records.sort(key=lambda r: ([e.label for e in evolutions].index(r.evolution), order[(r.variant, r.uq_method)], r.seed))
    return Experiment(records, compare_variants(records, uq.method), timing)


def compare_variants(records: Sequence[RunRecord], method: str) -> dict:
    """StatReport of each variant's Huber against PPT's, per evolution.

    Reports use ``a12(variant, PPT)``: above 0.5 means the variant loses more,
    i.e. PPT is better.
    """
    out: dict = {}
    for evo in dict.fromkeys(r.evolution for r in records):
        ok = [r for r in records if r.evolution == evo and r.status == "ok"]
        ppt = [r.target_huber for r in ok if r.variant == "PPT" and r.uq_method == method]
        if not ppt:
            continue
        out[evo] = {}
        for v in VARIANTS:
            vals = [r.target_huber for r in ok if r.variant == v and r.uq_method == method]
            if vals:
                out[evo][v] = StatReport.compare(vals, ppt)
    return out


def uq_comparison_row(evo: Evolution, uq: UQConfig, cfg: ModelConfig, seed: int, ks=(1, 3, 10),
                      clock: str = "wall", records: Sequence[RunRecord] = (), cmp: dict | None = None) -> dict:
    """One row of the UQ comparison table: Huber per method, mean Precision@K, time per method."""
    cmp = cmp or compare_methods(evo.target, uq, cfg, seed, ks, make_clock(clock))
    huber_by = {}
    for m in ("cs", "bayesian", "ensemble"):
        vals = [r.target_huber for r in records if r.evolution == evo.label and r.variant == "PPT"
                and r.uq_method == m and r.status == "ok"]
        huber_by[m] = float(np.median(vals)) if vals else None
    return {
        "evolution": evo.label,
        "huber": huber_by,
        "precision_at": {k: v["mean"] for k, v in cmp["precision"].items()},
        "precision_pairs": {k: v["pairs"] for k, v in cmp["precision"].items()},
        "time_s": cmp["time_s"],
    }


# --------------------------------------------------------------------------
# Report emission
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    return "" if v is None else f"{v:.12g}"


def _median(vals: list[float]) -> float | None:
    return float(np.median(vals)) if vals else None


def _summary(exp: Experiment) -> dict:
    cells: dict = {}
    for r in exp.records:
        cells.setdefault(r.evolution, {}).setdefault(f"{r.variant}/{r.uq_method}", []).append(r)
    out_cells = {}
    for evo, by_cell in cells.items():
        out_cells[evo] = {}
        for key, rs in by_cell.items():
            ok = [r for r in rs if r.status == "ok"]
            out_cells[evo][key] = {
                "runs": len(rs),
                "failed": len(rs) - len(ok),
                "median_target_huber": _median([r.target_huber for r in ok]),
                "median_convergence_time_s": _median([r.convergence_time_s for r in ok]),
                "median_uq_wall_time_s": _median([r.uq_wall_time_s for r in ok]),
            }
    tuning = {}
    for evo, by_cell in cells.items():
        pt = [r.convergence_time_s for r in by_cell.get(_ppt_key(exp, by_cell), []) if r.status == "ok"]
        ft = [r.convergence_time_s for k, rs in by_cell.items() if k.startswith("FINETUNE/")
              for r in rs if r.status == "ok"]
        entry = {"prompt_tuning_s": _median(pt), "fine_tuning_s": _median(ft)}
        if pt and ft:
            entry["fine_vs_prompt"] = StatReport.compare(ft, pt).to_dict()
        tuning[evo] = entry
    return {
        "format": SUMMARY_FORMAT,
        "cells": out_cells,
        "comparisons": {evo: {v: rep.to_dict() for v, rep in reps.items()} for evo, reps in exp.reports.items()},
        "timing": {"pretraining": exp.timing, "tuning": tuning},
        "uq": exp.uq,
    }


def _ppt_key(exp: Experiment, by_cell: dict) -> str:
    keys = [k for k in by_cell if k.startswith("PPT/")]
    return keys[0] if keys else ""


def uq_table(rows: Sequence[dict], ks: Sequence[int] | None = None) -> str:
    """CSV laid out like the UQ comparison table (UT = cs, BUQ = bayesian, EUQ = ensemble).

    ``ks`` defaults to the Precision@K columns present in the first row.
    """
    if ks is None:
        ks = [int(k) for k in rows[0]["precision_at"]] if rows else [1, 3, 10]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Evolution", "UT", "BUQ", "EUQ", *(f"Precision@{k}" for k in ks), "tau_UT", "tau_BUQ", "tau_EUQ"])
    for row in rows:
        hub = [("-" if row["huber"][m] is None else f"{row['huber'][m]:.2f}") for m in ("cs", "bayesian", "ensemble")]
        prec = [f"{round(100 * row['precision_at'][str(k)])}%" for k in ks]
        tau = [f"{row['time_s'][m]:.2f}s" for m in ("cs", "bayesian", "ensemble")]
        w.writerow([row["evolution"], *hub, *prec, *tau])
    return buf.getvalue()


def loss_curve_svg(curves: Sequence[Sequence[float]], title: str, width: int = 480, height: int = 300) -> str:
    """Total training loss per epoch, one polyline per run."""
    pts = [v for c in curves for v in c if math.isfinite(v)]
    lo, hi = (min(pts), max(pts)) if pts else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    n = max((len(c) for c in curves), default=1)
    pad = 40
    def xy(k, v):
        x = pad + (width - 2 * pad) * (k / max(n - 1, 1))
        y = height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))
        return f"{x:.2f},{y:.2f}"
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
             f'<title>{_xml(title)}</title>',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="#999"/>',
             f'<text x="{pad}" y="{pad - 12}" font-size="12">{_xml(title)}</text>',
             f'<text x="{pad}" y="{height - 12}" font-size="10">epoch 1..{n}; total loss {lo:.4g} .. {hi:.4g}</text>']
    for c in curves:
        if c:
            p = " ".join(xy(k, v) for k, v in enumerate(c) if math.isfinite(v))
            lines.append(f'<polyline fill="none" stroke="#1f77b4" stroke-opacity="0.6" points="{p}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _xml(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _slug(s: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in s).strip("_")


def emit_report(exp: Experiment, out_dir: str | Path) -> list[Path]:
    """Write results.csv, summary.json, uq_table.csv (when present) and one loss-curve SVG per cell."""
    if not exp.records:
        raise ValueError("no run records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in exp.records:
        w.writerow([r.evolution, r.variant, r.uq_method, r.seed, _fmt(r.target_huber),
                    _fmt(r.convergence_time_s), _fmt(r.uq_wall_time_s), r.status])
    (out / "results.csv").write_text(buf.getvalue(), encoding="utf-8")
    written.append(out / "results.csv")
    (out / "summary.json").write_text(json.dumps(_summary(exp), indent=2) + "\n", encoding="utf-8")
    written.append(out / "summary.json")
    if exp.uq:
        (out / "uq_table.csv").write_text(uq_table(exp.uq), encoding="utf-8")
        written.append(out / "uq_table.csv")
    curves: dict = {}
    for r in exp.records:
        if r.record is not None:
            curves.setdefault((r.evolution, r.variant, r.uq_method), []).append(r.record.totals)
    for (evo, variant, method), cs in curves.items():
        path = out / f"loss_{_slug(evo)}_{variant}_{method}.svg"
        path.write_text(loss_curve_svg(cs, f"{evo} {variant} ({method})"), encoding="utf-8")
        written.append(path)
    return written


def read_results(path: str | Path) -> list[RunRecord]:
    """Parse a results.csv back into records (training curves are not stored there)."""
    def num(s):
        return float(s) if s != "" else None
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != RESULT_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {list(rows[0].keys())}")
    return [RunRecord(r["evolution"], r["variant"], r["uq_method"], int(r["seed"]), num(r["target_huber"]),
                      num(r["convergence_time_s"]), float(r["uq_wall_time_s"] or 0.0), r["status"]) for r in rows]


def experiment_to_dict(exp: Experiment) -> dict:
    """JSON-ready form, including per-epoch training rows."""
    return {
        "records": [{
            "evolution": r.evolution, "variant": r.variant, "uq_method": r.uq_method, "seed": r.seed,
            "target_huber": r.target_huber, "convergence_time_s": r.convergence_time_s,
            "uq_wall_time_s": r.uq_wall_time_s, "status": r.status,
            "epochs": r.record.epochs if r.record is not None else None,
            "stopped_epoch": r.record.stopped_epoch if r.record is not None else None,
        } for r in exp.records],
        "timing": exp.timing,
        "uq": exp.uq,
    }


def experiment_from_dict(data: dict, method: str | None = None) -> Experiment:
    records = []
    for d in data["records"]:
        rec = None
        if d.get("epochs") is not None:
            rec = TrainRecord(label=f"{d['evolution']} {d['variant']}", epochs=d["epochs"],
                              stopped_epoch=d.get("stopped_epoch") or 0)
        records.append(RunRecord(d["evolution"], d["variant"], d["uq_method"], d["seed"], d["target_huber"],
                                 d["convergence_time_s"], d["uq_wall_time_s"], d["status"], rec))
    if method is None:
        ppt = [r.uq_method for r in records if r.variant == "PPT"]
        method = ppt[0] if ppt else (records[0].uq_method if records else "cs")
    return Experiment(records, compare_variants(records, method), data.get("timing", {}), data.get("uq", []))


def merge_experiments(parts: Sequence[Experiment], method: str) -> Experiment:
    records = [r for p in parts for r in p.records]
    timing: dict = {}
    uq: list = []
    for p in parts:
        timing.update(p.timing)
        uq.extend(p.uq)
    return Experiment(records, compare_variants(records, method), timing, uq)
