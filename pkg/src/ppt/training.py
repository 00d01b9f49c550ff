"""Pretraining over many evolution pairs, prompt tuning and the fine-tuning baseline.

All training losses are computed on normalized TTE (the DTC head's units).
One epoch is one pass over the selected target windows in shuffled
mini-batches; each target batch is paired with an equally sized source
batch drawn cyclically from the selected source windows.
"""

from __future__ import annotations

import copy
import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .clock import WallClock
from .datagen import Dataset, EvolutionPair
from .errors import NumericalError, TrainingError
from .transfer import TransferModel, alignment_losses, state_bounds
from .twin import ModelConfig, TTENormalizer, dtm_aux_loss, encode_windows, next_states
from .uq import UQConfig, select_samples

COMPONENTS = ("huber", "mar", "cond", "prompt", "aux")


def huber(y, y_hat, delta: float = 1.0):
    """Elementwise Huber loss on scalars, arrays or tensors."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    r = y - y_hat
    if torch.is_tensor(r):
        a = r.abs()
        return torch.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    a = np.abs(r)
    out = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    return float(out) if np.ndim(out) == 0 else out


def prompt_loss(tau, tau_plus, tau_minus, form: str = "squared", delta: float = 1.0):
    """``(tau - tau_plus)^2 - (tau - tau_minus)^2``; may be negative.

    ``form="huber"`` swaps both squares for Huber terms.
    """
    if form == "squared":
        return (tau - tau_plus) ** 2 - (tau - tau_minus) ** 2
    if form == "huber":
        return huber(tau, tau_plus, delta) - huber(tau, tau_minus, delta)
    raise ValueError(f"unknown prompt loss form {form!r}")


# --------------------------------------------------------------------------
# Prompts
# --------------------------------------------------------------------------

class Polarity(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass(frozen=True)
class Prompt:
    """An encoded window (``[features..., tte, mask]`` rows) with slot ``i-1`` open or filled."""

    window: np.ndarray
    filled_value: float | None = None
    polarity: Polarity | None = None

    @property
    def mask(self) -> np.ndarray:
        return self.window[:, -1]

    @property
    def filled(self) -> bool:
        return self.polarity is not None


def make_prompt(window: np.ndarray) -> Prompt:
    """Template with the TTE of the last two slots zeroed and masked."""
    w = np.array(window, dtype=float, copy=True)
    if w.ndim != 2 or w.shape[0] < 2:
        raise ValueError("a prompt needs a window of at least two slots")
    w[-2:, -2] = 0.0
    w[-2:, -1] = 1.0
    return Prompt(w)


def fill_prompt(template: Prompt, value: float, polarity: Polarity) -> Prompt:
    if template.filled:
        raise ValueError("prompt is already filled")
    w = template.window.copy()
    w[-2, -2] = value
    w[-2, -1] = 0.0
    return Prompt(w, float(value), Polarity(polarity))


def fill_batch(X: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Batched ``fill_prompt(make_prompt(x), v)`` on encoded windows."""
    X = X.clone()
    X[:, -1, -2] = 0.0
    X[:, -1, -1] = 1.0
    X[:, -2, -2] = values.to(X.dtype)
    X[:, -2, -1] = 0.0
    return X


# --------------------------------------------------------------------------
# Records, early stopping
# --------------------------------------------------------------------------

@dataclass
class TrainRecord:
    label: str = ""
    epochs: list[dict] = field(default_factory=list)
    start: float | None = None
    stop: float | None = None
    stopped_epoch: int = 0
    uses_prompt: bool = True

    @property
    def totals(self) -> list[float]:
        return [e["total"] for e in self.epochs]

    def to_csv(self, path: str | Path) -> None:
        cols = ["epoch", *COMPONENTS, "total", "epoch_time_s"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for k, e in enumerate(self.epochs, 1):
                row = [k]
                for c in (*COMPONENTS, "total", "epoch_time_s"):
                    v = e.get(c)
                    row.append("" if v is None else f"{v:.12g}")
                w.writerow(row)


def convergence_time(record: TrainRecord) -> float:
    if record.start is None or record.stop is None:
        raise ValueError("training never started")
    return record.stop - record.start


class EarlyStopping:
    """Stops once ``patience`` consecutive epochs fail to beat the best by more than ``min_delta``."""

    def __init__(self, patience: int = 5, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.wait = 0

    def update(self, loss: float) -> bool:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


# --------------------------------------------------------------------------
# Loss assembly
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Flags:
    use_tl: bool = True
    use_uq: bool = True
    use_pt: bool = True
    freeze_source: bool = False
    alpha: float = 1.0
    beta: float = 1.0
    delta: float = 1.0
    prompt_form: str = "squared"


@dataclass
class Batch:
    """Encoded windows with their (normalized) labels and next-state targets."""

    X: torch.Tensor
    y: torch.Tensor
    next_state: torch.Tensor
    valid: torch.Tensor
    X_prev: torch.Tensor | None = None  # windows ending at i-1, for the negative prompt
    has_prev: torch.Tensor | None = None


def make_batch(d: Dataset, ends: np.ndarray, cfg: ModelConfig, norm: TTENormalizer,
               dtype=torch.float32, with_prev: bool = False) -> Batch:
    ends = np.asarray(ends)
    X = torch.as_tensor(encode_windows(d, ends, cfg.window, norm), dtype=dtype)
    y = torch.as_tensor(norm.normalize(d.tte[ends]), dtype=dtype)
    nxt, valid = next_states(d, ends)
    b = Batch(X, y, torch.as_tensor(nxt, dtype=dtype), torch.as_tensor(valid))
    if with_prev:
        prev = np.maximum(ends - 1, 0)
        b.X_prev = torch.as_tensor(encode_windows(d, prev, cfg.window, norm), dtype=dtype)
        b.has_prev = torch.as_tensor(ends >= 1)
    return b


def step_losses(model: TransferModel, tgt: Batch, src: Batch | None, flags: Flags, clock=None) -> dict:
    """Weighted loss components for one step; ``total`` is their sum."""
    clock = clock or WallClock()
    t = model.tdt(tgt.X)
    clock.tick(len(tgt.y))
    zero = t.dtc.tau.new_zeros(())
    huber_l = huber(t.dtc.tau, tgt.y, flags.delta).mean()
    aux = dtm_aux_loss(t.dtm.P, tgt.next_state, model.tdt.dtm.lo, model.tdt.dtm.hi, tgt.valid)
    mar = cond = zero
    if flags.use_tl and src is not None:
        s = model.sdt(src.X)
        clock.tick(len(src.y))
        huber_l = huber_l + huber(s.dtc.tau, src.y, flags.delta).mean()
        aux = aux + dtm_aux_loss(s.dtm.P, src.next_state, model.sdt.dtm.lo, model.sdt.dtm.hi, src.valid)
        mar, cond = alignment_losses(s, t, model.heads)
    out = {"huber": huber_l, "mar": mar, "cond": cond, "aux": flags.alpha * aux, "prompt": None}
    if flags.use_pt and tgt.X_prev is not None:
        keep = tgt.has_prev
        if bool(keep.any()):
            with torch.no_grad():
                fill = model.sdt(tgt.X_prev[keep]).dtc.tau
            tau_minus = model.tdt(fill_batch(tgt.X[keep], fill)).dtc.tau
            clock.tick(2 * int(keep.sum()))
            pl = prompt_loss(tgt.y[keep], t.dtc.tau[keep], tau_minus, flags.prompt_form, flags.delta).mean()
        else:
            pl = zero
        out["prompt"] = flags.beta * pl
    out["total"] = sum(v for k, v in out.items() if v is not None)
    return out


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

def _train(model: TransferModel, src: Dataset | None, src_sel: np.ndarray | None, tgt: Dataset,
           tgt_sel: np.ndarray, cfg: ModelConfig, flags: Flags, seed: int, label: str,
           clock=None) -> TrainRecord:
    clock = clock or WallClock()
    dtype = model.tdt.tte_mean.dtype
    norm = model.tdt.normalizer
    use_src = flags.use_tl and src is not None and src_sel is not None and len(src_sel) > 0
    with_prompt = flags.use_pt
    freeze = flags.freeze_source or not use_src
    params = [p for name, p in model.named_parameters() if not (freeze and name.startswith("sdt."))]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(seed)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)

    tgt_sel = np.asarray(tgt_sel)
    src_cache = make_batch(src, np.asarray(src_sel), cfg, norm, dtype) if use_src else None
    tgt_cache = make_batch(tgt, tgt_sel, cfg, norm, dtype, with_prev=with_prompt)
    src_order = torch.randperm(len(src_sel), generator=gen) if use_src else None
    src_pos = 0

    record = TrainRecord(label=label, uses_prompt=with_prompt)
    model.train()
    record.start = last = clock.now()
    for epoch in range(1, cfg.max_epochs + 1):
        sums = {k: 0.0 for k in (*COMPONENTS, "total")}
        n_steps = 0
        for idx in torch.randperm(len(tgt_sel), generator=gen).split(cfg.batch_size):
            tb = _take(tgt_cache, idx)
            sb = None
            if use_src:
                take = []
                while len(take) < len(idx):
                    if src_pos == len(src_order):
                        src_order, src_pos = torch.randperm(len(src_sel), generator=gen), 0
                    n = min(len(idx) - len(take), len(src_order) - src_pos)
                    take.extend(src_order[src_pos:src_pos + n].tolist())
                    src_pos += n
                sb = _take(src_cache, torch.as_tensor(take))
            try:
                parts = step_losses(model, tb, sb, flags, clock)
            except NumericalError as exc:
                raise TrainingError(f"{label}: {exc} at epoch {epoch}") from exc
            if not torch.isfinite(parts["total"]):
                raise TrainingError(f"{label}: non-finite total loss at epoch {epoch}")
            opt.zero_grad()
            parts["total"].backward()
            nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            for k, v in parts.items():
                if v is not None:
                    sums[k] += float(v.detach())
            n_steps += 1
        now = clock.now()
        row = {k: (sums[k] / n_steps) for k in sums}
        row["total"] = sum(row[k] for k in COMPONENTS if not (k == "prompt" and not with_prompt))
        if not with_prompt:
            row["prompt"] = None
        if not math.isfinite(row["total"]):
            raise TrainingError(f"{label}: non-finite total loss at epoch {epoch}")
        row["epoch_time_s"] = now - last
        last = now
        record.epochs.append(row)
        record.stopped_epoch = epoch
        if stopper.update(row["total"]):
            break
    record.stop = last
    model.eval()
    return record


def _take(b: Batch, idx: torch.Tensor) -> Batch:
    out = Batch(b.X[idx], b.y[idx], b.next_state[idx], b.valid[idx])
    if b.X_prev is not None:
        out.X_prev, out.has_prev = b.X_prev[idx], b.has_prev[idx]
    return out


# --------------------------------------------------------------------------
# Public entry points
# --------------------------------------------------------------------------

def fit_normalization(model: TransferModel, *datasets: Dataset) -> None:
    """Freeze state bounds and the TTE normalizer from training data."""
    lo, hi = state_bounds(*(d.features for d in datasets))
    model.set_normalization(lo, hi, TTENormalizer.fit(*datasets))


def new_model(cfg: ModelConfig, seed: int, *datasets: Dataset, dtype=torch.float32) -> TransferModel:
    torch.manual_seed(seed)
    model = TransferModel(cfg).to(dtype)
    fit_normalization(model, *datasets)
    return model


@dataclass
class PretrainResult:
    model: TransferModel
    time_s: float
    records: list[TrainRecord]
    uq_time_s: float

    @property
    def pair_times(self) -> list[float]:
        return [convergence_time(r) for r in self.records]


def pretrain(pairs: Sequence[EvolutionPair], cfg: ModelConfig, uq: UQConfig, seed: int,
             flags: Flags = Flags(use_pt=False), clock=None) -> PretrainResult:
    """Train one source/target model pair by pair; total time is the sum of per-pair convergence times."""
    if not pairs:
        raise ValueError("pretraining needs at least one pair")
    clock = clock or WallClock()
    flags = replace(flags, use_pt=False, use_tl=True)
    model = new_model(cfg, seed, *(d for p in pairs for d in (p.source, p.target)))
    records, uq_time = [], 0.0
    for k, pair in enumerate(pairs):
        s_sel = select_samples(pair.source, uq, cfg, seed + k, flags.use_uq, clock)
        t_sel = select_samples(pair.target, uq, cfg, seed + k, flags.use_uq, clock)
        uq_time += s_sel.wall_time_s + t_sel.wall_time_s
        records.append(_train(model, pair.source, s_sel.indices, pair.target, t_sel.indices, cfg, flags,
                              seed + k, f"pretrain {pair.label}", clock))
    return PretrainResult(model, sum(convergence_time(r) for r in records), records, uq_time)


@dataclass
class TuneResult:
    model: TransferModel
    time_s: float
    record: TrainRecord
    uq_time_s: float


def prompt_tune(pretrained: TransferModel, pair: EvolutionPair, cfg: ModelConfig, uq: UQConfig, seed: int,
                flags: Flags = Flags(), clock=None, selections: tuple | None = None) -> TuneResult:
    """Tune a copy of ``pretrained`` on ``pair``; the input model is left untouched.

    ``selections`` may supply precomputed ``(source, target)`` selections.
    """
    clock = clock or WallClock()
    model = copy.deepcopy(pretrained)
    if selections is None:
        s_sel = select_samples(pair.source, uq, cfg, seed, flags.use_uq, clock) if flags.use_tl else None
        t_sel = select_samples(pair.target, uq, cfg, seed, flags.use_uq, clock)
    else:
        s_sel, t_sel = selections
    uq_time = t_sel.wall_time_s + (s_sel.wall_time_s if s_sel is not None and flags.use_tl else 0.0)
    record = _train(model, pair.source if flags.use_tl else None, s_sel.indices if s_sel is not None else None,
                    pair.target, t_sel.indices, cfg, flags, seed, f"tune {pair.label}", clock)
    return TuneResult(model, convergence_time(record), record, uq_time)


def fine_tune(pretrained: TransferModel, pair: EvolutionPair, cfg: ModelConfig, uq: UQConfig, seed: int,
              flags: Flags = Flags(), clock=None, selections: tuple | None = None) -> TuneResult:
    """The prompt-free baseline: same objective without the prompt term."""
    return prompt_tune(pretrained, pair, cfg, uq, seed, replace(flags, use_pt=False, beta=0.0), clock, selections)
