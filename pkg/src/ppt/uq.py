"""Per-sample uncertainty scores, top-K selection and method comparison.

Three scorers share one contract: an indicator model predicts the TTE of
every window in a dataset and the scorer turns those predictions into a
non-negative score ``xi`` per sample.

* ``cs``: ``lam * |2 PIT - 1| + (1 - lam) * sigma / max(sigma)`` from a
  heteroscedastic indicator.
* ``bayesian``: population std of ``N_B`` MC-dropout predictions.
* ``ensemble``: population std of ``N_E`` indicators, each trained on one
  contiguous slice of the data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import stats
from torch import nn

from .attention import Contextualizer, TransformerStack
from .clock import WallClock
from .datagen import Dataset
from .errors import ConfigurationError, NumericalError
from .twin import GRU, ModelConfig, TTENormalizer, encode_windows

METHODS = ("cs", "bayesian", "ensemble")


@dataclass(frozen=True)
class UQConfig:
    method: str = "cs"
    lam: float = 0.9
    n_passes: int = 10
    dropout_p: float = 0.1
    n_members: int = 5
    k: int = 0  # 0 selects ceil(k_fraction * n)
    k_fraction: float = 0.5
    indicator_epochs: int = 2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown UQ method {self.method!r}; expected one of {METHODS}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lam must lie in [0, 1], got {self.lam}")
        if self.n_passes < 2 or self.n_members < 2:
            raise ConfigurationError("n_passes and n_members must be >= 2")
        if not 0.0 < self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must lie in (0, 1), got {self.dropout_p}")
        if self.k < 0 or not 0.0 < self.k_fraction <= 1.0:
            raise ConfigurationError("k must be >= 0 and k_fraction in (0, 1]")

    def effective_k(self, n: int) -> int:
        k = self.k if self.k else math.ceil(self.k_fraction * n)
        return max(1, min(k, n))


@dataclass(frozen=True)
class UncertaintyScores:
    xi: np.ndarray
    method: str
    wall_time_s: float

    def __len__(self) -> int:
        return len(self.xi)


class IndicatorModel(nn.Module):
    """DTC-shaped predictor (attention -> GRU -> linear) with a (mean, std) head."""

    def __init__(self, cfg: ModelConfig, dropout: float = 0.1):
        super().__init__()
        self.cfg = cfg
        self.context = Contextualizer(cfg.input_dim, cfg.attention, dropout)
        self.stack = TransformerStack(cfg.attention, dropout)
        self.gru = GRU(cfg.attention.d_model, cfg.gru_hidden)
        self.drop = nn.Dropout(dropout)
        self.head = nn.Linear(cfg.gru_hidden, 2)
        self.norm = TTENormalizer()

    def forward(self, X: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        H = self.gru(self.stack(self.context(X)))
        out = self.head(self.drop(H[:, -1]))
        return out[:, 0], nn.functional.softplus(out[:, 1]) + 1e-4

    def _windows(self, d: Dataset) -> torch.Tensor:
        X = encode_windows(d, np.arange(len(d)), self.cfg.window, self.norm)
        return torch.as_tensor(X, dtype=self.head.weight.dtype)

    def _batched(self, d: Dataset, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
        X = self._windows(d)
        mus, sds = [], []
        with torch.no_grad():
            for s in range(0, X.shape[0], batch):
                mu, sd = self(X[s:s + batch])
                mus.append(mu)
                sds.append(sd)
        mu = self.norm.denormalize(torch.cat(mus).double().numpy())
        return mu, torch.cat(sds).double().numpy() * self.norm.std

    def predict(self, d: Dataset) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic ``(mean, std)`` per sample, in seconds."""
        self.eval()
        return self._batched(d)

    def predict_stochastic(self, d: Dataset, p: float) -> np.ndarray:
        """One MC-dropout pass with dropout probability ``p``; point predictions in seconds."""
        drops = [m for m in self.modules() if isinstance(m, nn.Dropout)]
        saved = [m.p for m in drops]
        for m in drops:
            m.p = p
        self.train()
        try:
            return self._batched(d)[0]
        finally:
            for m, q in zip(drops, saved):
                m.p = q
            self.eval()


def train_indicator(d: Dataset, cfg: ModelConfig, seed: int, epochs: int = 2, dropout: float = 0.1,
                    ends: Sequence[int] | None = None, clock=None) -> IndicatorModel:
    """Fit an indicator with Gaussian NLL on the windows ending at ``ends``."""
    clock = clock or WallClock()
    torch.manual_seed(seed)
    model = IndicatorModel(cfg, dropout)
    model.norm = TTENormalizer.fit(d)
    ends = np.arange(len(d)) if ends is None else np.asarray(ends)
    X = torch.as_tensor(encode_windows(d, ends, cfg.window, model.norm), dtype=torch.get_default_dtype())
    y = torch.as_tensor(model.norm.normalize(d.tte[ends]), dtype=X.dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(seed)
    nll = nn.GaussianNLLLoss()
    model.train()
    for _ in range(epochs):
        for batch in torch.randperm(len(ends), generator=gen).split(cfg.batch_size):
            mu, sd = model(X[batch])
            loss = nll(mu, y[batch], sd * sd)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            clock.tick(len(batch))
    model.eval()
    return model


def score_cs(ind, d: Dataset, lam: float, clock=None) -> UncertaintyScores:
    if len(d) == 0:
        raise ValueError("cannot score an empty dataset")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    clock = clock or WallClock()
    start = clock.now()
    mu, sigma = ind.predict(d)
    clock.tick(len(d))
    mu, sigma = np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
    if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
        raise NumericalError("predictive std must be positive and finite")
    calibration = np.abs(2.0 * stats.norm.cdf((d.tte - mu) / sigma) - 1.0)
    sharpness = sigma / sigma.max()
    xi = lam * calibration + (1.0 - lam) * sharpness
    return UncertaintyScores(xi, "cs", clock.now() - start)


def score_bayesian(ind, d: Dataset, n_passes: int, p: float, seed: int = 0, clock=None) -> UncertaintyScores:
    if n_passes < 2:
        raise ValueError(f"need at least two dropout passes, got {n_passes}")
    clock = clock or WallClock()
    start = clock.now()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        preds = []
        for _ in range(n_passes):
            preds.append(np.asarray(ind.predict_stochastic(d, p), dtype=float))
            clock.tick(len(d))
    xi = np.std(np.stack(preds), axis=0)
    return UncertaintyScores(xi, "bayesian", clock.now() - start)


def ensemble_partition(n: int, n_members: int) -> list[np.ndarray]:
    """Contiguous, balanced (+-1) index blocks; earlier blocks take the remainder."""
    if n < n_members:
        raise ValueError(f"cannot split {n} samples into {n_members} members")
    return np.array_split(np.arange(n), n_members)


def score_ensemble(d: Dataset, n_members: int, trainer: Callable[[Dataset, np.ndarray], object],
                   clock=None) -> UncertaintyScores:
    """``trainer(d, indices)`` returns a fitted indicator for one block."""
    if n_members < 2:
        raise ValueError(f"need at least two ensemble members, got {n_members}")
    clock = clock or WallClock()
    start = clock.now()
    preds = []
    for part in ensemble_partition(len(d), n_members):
        member = trainer(d, part)
        preds.append(np.asarray(member.predict(d)[0], dtype=float))
        clock.tick(len(d))
    xi = np.std(np.stack(preds), axis=0)
    return UncertaintyScores(xi, "ensemble", clock.now() - start)


def select_top_k(s: UncertaintyScores | np.ndarray, K: int) -> list[int]:
    """Indices of the ``K`` largest scores, descending; ties go to the smaller index."""
    xi = np.asarray(s.xi if isinstance(s, UncertaintyScores) else s, dtype=float)
    if not 1 <= K <= xi.size:
        raise ValueError(f"K={K} outside [1, {xi.size}]")
    order = np.lexsort((np.arange(xi.size), -xi))
    return [int(i) for i in order[:K]]


def precision_at_k(a: Sequence[int], b: Sequence[int], K: int) -> float:
    if K < 1 or K > len(a) or K > len(b):
        raise ValueError(f"K={K} outside [1, min(|a|, |b|)]")
    return len(set(a[:K]) & set(b[:K])) / K


# --------------------------------------------------------------------------
# Pipeline helpers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Selection:
    indices: np.ndarray  # temporal order
    scores: UncertaintyScores | None
    wall_time_s: float


def score_dataset(d: Dataset, method: str, uq: UQConfig, cfg: ModelConfig, seed: int,
                  clock=None, indicator: IndicatorModel | None = None) -> UncertaintyScores:
    """Train what the method needs and score ``d``; timing covers training too."""
    clock = clock or WallClock()
    start = clock.now()
    if method == "ensemble":
        def trainer(ds, idx, _k=iter(range(uq.n_members))):
            return train_indicator(ds, cfg, seed + 1000 * (next(_k) + 1), uq.indicator_epochs,
                                   uq.dropout_p, ends=idx, clock=clock)
        s = score_ensemble(d, uq.n_members, trainer, clock)
    else:
        ind = indicator or train_indicator(d, cfg, seed, uq.indicator_epochs, uq.dropout_p, clock=clock)
        if method == "cs":
            s = score_cs(ind, d, uq.lam, clock)
        elif method == "bayesian":
            s = score_bayesian(ind, d, uq.n_passes, uq.dropout_p, seed, clock)
        else:
            raise ConfigurationError(f"unknown UQ method {method!r}")
    return UncertaintyScores(s.xi, s.method, clock.now() - start)


def select_samples(d: Dataset, uq: UQConfig, cfg: ModelConfig, seed: int, use_uq: bool = True,
                   clock=None) -> Selection:
    """Top-K windows by uncertainty (or the first K when ``use_uq`` is off), in temporal order."""
    K = uq.effective_k(len(d))
    if not use_uq:
        return Selection(np.arange(K), None, 0.0)
    s = score_dataset(d, uq.method, uq, cfg, seed, clock)
    return Selection(np.sort(np.asarray(select_top_k(s, K))), s, s.wall_time_s)


def compare_methods(d: Dataset, uq: UQConfig, cfg: ModelConfig, seed: int, ks: Sequence[int] = (1, 3, 10),
                    clock=None) -> dict:
    """Score ``d`` with every method and report Precision@K between each pair.

    CS and Bayesian scoring share one indicator; each method's time includes
    the training it needs.
    """
    clock = clock or WallClock()
    t0 = clock.now()
    shared = train_indicator(d, cfg, seed, uq.indicator_epochs, uq.dropout_p, clock=clock)
    t_train = clock.now() - t0
    scores = {
        "cs": score_dataset(d, "cs", uq, cfg, seed, clock, indicator=shared),
        "bayesian": score_dataset(d, "bayesian", uq, cfg, seed, clock, indicator=shared),
        "ensemble": score_dataset(d, "ensemble", uq, cfg, seed, clock),
    }
    K = max(ks)
    ranked = {m: select_top_k(s, min(K, len(d))) for m, s in scores.items()}
    pairs = [("cs", "bayesian"), ("cs", "ensemble"), ("bayesian", "ensemble")]
    precision = {}
    for k in ks:
        k = min(k, len(d))
        per_pair = {f"{a}|{b}": precision_at_k(ranked[a], ranked[b], k) for a, b in pairs}
        precision[str(k)] = {"pairs": per_pair, "mean": float(np.mean(list(per_pair.values())))}
    return {
        "scores": scores,
        "ranked": ranked,
        "precision": precision,
        "time_s": {
            "cs": scores["cs"].wall_time_s + t_train,
            "bayesian": scores["bayesian"].wall_time_s + t_train,
            "ensemble": scores["ensemble"].wall_time_s,
        },
    }


def export_scores(s: UncertaintyScores, K: int, csv_path: str | Path) -> None:
    """``index,xi`` CSV plus a ``{method, wall_time_s, K}`` JSON sidecar."""
    csv_path = Path(csv_path)
    lines = ["index,xi"] + [f"{i},{v:.9g}" for i, v in enumerate(s.xi)]
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {"method": s.method, "wall_time_s": s.wall_time_s, "K": int(K)}
    csv_path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
