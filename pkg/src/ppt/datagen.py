"""Synthetic CPS datasets with controllable source/target shift, plus CSV I/O.

Two generators are provided:

* ``generate_elevator_dataset`` simulates a single-server FIFO queue of
  passengers. The label is the passenger's waiting time.
* ``generate_ads_dataset`` simulates short multi-lane driving scenarios with
  a random number of NPC vehicles. The label is the ego vehicle's
  time-to-collision.

Features are z-scored per dataset at generation time; the statistics travel
with the dataset. All floats are rounded to 9 significant digits on creation,
which makes the CSV codec lossless for generated data.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import optimize, stats

from .errors import ConfigurationError, ParseError

ELEVATOR_FEATURES = (
    "arrival_floor",
    "destination_floor",
    "mass",
    "boarding_time",
    "alighting_time",
    "queue_length",
    "hour_sin",
    "hour_cos",
)

ADS_FEATURES = (
    "ego_speed",
    "ego_heading",
    "ego_progress",
    "npc_count",
    "npc_same_lane",
    "front_gap",
    "front_closing_speed",
    "rear_gap",
    "rear_closing_speed",
    "nearest_distance",
    "nearest_lane",
    "nearest_speed",
    "npc_speed_mean",
    "npc_speed_std",
    "npc_abs_gap_mean",
    "npc_left_lane",
    "npc_right_lane",
    "npc_density_ahead",
    "scenario_step",
)

DEFAULT_TTE_MAX = 60.0


def _round9(a: np.ndarray) -> np.ndarray:
    flat = [float(f"{v:.9g}") for v in np.asarray(a, dtype=float).ravel()]
    return np.asarray(flat, dtype=float).reshape(np.shape(a))


@dataclass(frozen=True)
class Sample:
    """One timestamped observation. Padding samples carry ``padding=True``."""

    t: int
    features: tuple[float, ...]
    tte: float
    padding: bool = False

    def __post_init__(self):
        if not math.isfinite(self.tte) or self.tte < 0:
            raise ValueError(f"tte must be finite and non-negative, got {self.tte}")
        if not all(math.isfinite(v) for v in self.features):
            raise ValueError("features must be finite")


@dataclass(frozen=True)
class SubjectSystem:
    name: str
    cps_params: Mapping[str, float] = field(default_factory=dict)
    env_params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.name:
            raise ConfigurationError("subject system name must be non-empty")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "cps_params": dict(self.cps_params),
            "env_params": dict(self.env_params),
        }


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable, time-ordered sequence of samples from one subject system.

    Samples are stored column-wise (``t``, ``features``, ``tte``); indexing
    returns :class:`Sample` objects.
    """

    system: SubjectSystem
    t: np.ndarray
    features: np.ndarray
    tte: np.ndarray
    seed: int | None = None
    feature_means: np.ndarray | None = None
    feature_stds: np.ndarray | None = None

    def __post_init__(self):
        t = np.array(self.t, dtype=np.int64).reshape(-1)
        x = np.array(self.features, dtype=float)
        y = np.array(self.tte, dtype=float).reshape(-1)
        if x.ndim != 2 or x.shape[0] != t.size or y.size != t.size:
            raise ValueError("t, features and tte must describe the same number of samples")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("t must be strictly increasing")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        if np.any(y < 0):
            raise ValueError("tte must be non-negative")
        for a in (t, x, y):
            a.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "tte", y)
        for name in ("feature_means", "feature_stds"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=float).reshape(-1)
                v.setflags(write=False)
                object.__setattr__(self, name, v)

    @property
    def F(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.t.size

    def __getitem__(self, i: int) -> Sample:
        return Sample(int(self.t[i]), tuple(float(v) for v in self.features[i]), float(self.tte[i]))

    @property
    def samples(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]

    def slice(self, start: int, stop: int) -> "Dataset":
        return Dataset(
            self.system,
            self.t[start:stop],
            self.features[start:stop],
            self.tte[start:stop],
            seed=self.seed,
            feature_means=self.feature_means,
            feature_stds=self.feature_stds,
        )

    def metadata(self) -> dict:
        return {
            "system_name": self.system.name,
            "F": self.F,
            "seed": self.seed,
            "cps_params": dict(self.system.cps_params),
            "env_params": dict(self.system.env_params),
            "feature_means": None if self.feature_means is None else self.feature_means.tolist(),
            "feature_stds": None if self.feature_stds is None else self.feature_stds.tolist(),
        }


@dataclass(frozen=True)
class EvolutionPair:
    source: Dataset
    target: Dataset
    label: str = ""

    def __post_init__(self):
        if self.source.F != self.target.F:
            raise ConfigurationError("source and target feature widths differ")
        if self.source.system.name == self.target.system.name:
            raise ConfigurationError("source and target must be different subject systems")
        if not self.label:
            object.__setattr__(self, "label", f"{self.source.system.name}→{self.target.system.name}")


def split_dataset(d: Dataset, n_first: int) -> tuple[Dataset, Dataset]:
    """Temporal split: the first ``n_first`` samples and the remainder."""
    if not 0 < n_first < len(d):
        raise ValueError(f"split point {n_first} outside (0, {len(d)})")
    return d.slice(0, n_first), d.slice(n_first, len(d))


def _standardize(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    means = raw.mean(axis=0)
    stds = raw.std(axis=0)
    stds = np.where(stds > 1e-12, stds, 1.0)
    return _round9((raw - means) / stds), means, stds


def _require(params: Mapping[str, float], key: str, system: str) -> float:
    if key not in params:
        raise ConfigurationError(f"subject system {system!r} is missing required parameter {key!r}")
    return float(params[key])


def _check_n(n: int) -> None:
    if int(n) < 1:
        raise ConfigurationError(f"sample count must be positive, got {n}")


# --------------------------------------------------------------------------
# Elevator
# --------------------------------------------------------------------------

def simulate_elevator(system: SubjectSystem, n: int, seed: int, n_features: int = 8) -> dict[str, np.ndarray]:
    """Raw queueing simulation behind :func:`generate_elevator_dataset`.

    Returns the intermediate arrays (inter-arrival gaps, service times,
    label noise, backlog) alongside the unscaled features and labels.
    """
    _check_n(n)
    dq = _require(system.cps_params, "dispatcher_quality", system.name)
    lam = _require(system.env_params, "traffic_intensity", system.name)
    if not 0.0 <= dq <= 1.0:
        raise ConfigurationError(f"dispatcher_quality must lie in [0, 1], got {dq}")
    if lam <= 0:
        raise ConfigurationError(f"traffic_intensity must be positive, got {lam}")
    floors = int(system.env_params.get("floors", 12))
    lobby = float(system.env_params.get("lobby_fraction", 0.5))
    start_hour = float(system.env_params.get("start_hour", 8.5))
    floor_time = float(system.cps_params.get("floor_time", 1.5))
    door_time = float(system.cps_params.get("door_time", 3.0))

    rng = np.random.default_rng(seed)
    gaps = rng.exponential(1.0 / lam, n)
    arrival = np.cumsum(gaps)
    from_lobby = rng.random(n) < lobby
    arr_floor = np.where(from_lobby, 0, rng.integers(1, floors, n))
    to_lobby = rng.random(n) < 0.5
    other = rng.integers(1, floors, n)
    dest = np.where(from_lobby, other, np.where(to_lobby, 0, other))
    # a non-lobby passenger drawn to their own floor rides to the lobby
    dest = np.where(dest == arr_floor, 0, dest)
    mass = np.clip(rng.normal(75.0, 12.0, n), 40.0, 140.0)
    boarding = 1.0 + (mass / 75.0) * rng.gamma(2.0, 0.5, n)
    alighting = 0.8 + rng.gamma(2.0, 0.4, n)
    service = boarding + alighting + door_time + floor_time * np.abs(dest - arr_floor)
    noise = rng.normal(0.0, 1.0, n) * (0.5 + 0.25 * boarding)
    extra = rng.normal(0.0, 1.0, (n, max(0, n_features - len(ELEVATOR_FEATURES))))

    backlog = np.zeros(n)
    depart = np.zeros(n)
    for k in range(n):
        if k > 0:
            backlog[k] = max(0.0, depart[k - 1] - arrival[k])
        depart[k] = arrival[k] + backlog[k] + service[k]
    served = np.searchsorted(depart, arrival, side="right")
    queue = np.maximum(np.arange(n) - served, 0)

    hour = start_hour + arrival / 3600.0
    raw = np.column_stack([
        arr_floor, dest, mass, boarding, alighting, queue,
        np.sin(2 * np.pi * hour / 24.0), np.cos(2 * np.pi * hour / 24.0),
    ]).astype(float)
    raw = np.hstack([raw, extra])[:, :n_features]
    tte = np.maximum(0.0, backlog * (2.0 - dq) + noise)
    return {
        "gaps": gaps, "service": service, "noise": noise, "backlog": backlog,
        "features": raw, "tte": tte,
    }


def generate_elevator_dataset(system: SubjectSystem, n: int, seed: int, n_features: int = 8) -> Dataset:
    """Passenger waiting times from a single-server queue.

    ``tte = max(0, backlog * (2 - dispatcher_quality) + noise)`` where the
    backlog follows the Lindley recursion over exponential inter-arrival
    gaps (rate ``traffic_intensity``) and the noise scale grows with the
    passenger's boarding time.
    """
    sim = simulate_elevator(system, n, seed, n_features)
    x, means, stds = _standardize(sim["features"])
    return Dataset(system, np.arange(n), x, _round9(sim["tte"]), seed=seed,
                   feature_means=means, feature_stds=stds)


# --------------------------------------------------------------------------
# ADS
# --------------------------------------------------------------------------

def _count_moments(m: float, s: float, kmax: int) -> tuple[float, float]:
    k = np.arange(kmax + 1)
    upper = stats.norm.cdf((k + 0.5 - m) / s)
    lower = np.concatenate([[0.0], upper[:-1]])
    p = upper - lower
    p[-1] += 1.0 - upper[-1]
    mean = float(np.sum(k * p))
    return mean, float(np.sqrt(max(np.sum(k * k * p) - mean * mean, 0.0)))


def latent_npc_normal(mean: float, std: float) -> tuple[float, float]:
    """Latent normal whose rounded, clipped-at-zero draws have ``mean`` and ``std``."""
    if std == 0:
        return mean, 0.0
    kmax = int(math.ceil(mean + 12 * std)) + 5

    def resid(v):
        mu, sd = _count_moments(v[0], math.exp(v[1]), kmax)
        return [mu - mean, sd - std]

    sol = optimize.least_squares(resid, [mean, math.log(std)], xtol=1e-12, ftol=1e-12)
    return float(sol.x[0]), float(math.exp(sol.x[1]))


def simulate_ads(system: SubjectSystem, n: int, seed: int) -> dict[str, np.ndarray]:
    """Raw scenario simulation behind :func:`generate_ads_dataset`."""
    _check_n(n)
    npc_mean = _require(system.env_params, "npc_mean", system.name)
    npc_std = _require(system.env_params, "npc_std", system.name)
    if npc_mean <= 0 or npc_std < 0:
        raise ConfigurationError(f"need npc_mean > 0 and npc_std >= 0, got {npc_mean}, {npc_std}")
    length = int(system.env_params.get("scenario_length", 5))
    spread = float(system.env_params.get("speed_spread", 3.0))
    tte_max = float(system.env_params.get("tte_max", DEFAULT_TTE_MAX))
    dt = float(system.env_params.get("step_seconds", 0.5))
    car_len = 4.5

    rng = np.random.default_rng(seed)
    m, s = latent_npc_normal(npc_mean, npc_std)
    n_scen = -(-n // length)
    counts = np.maximum(0, np.rint(rng.normal(m, s, n_scen) if s > 0 else np.full(n_scen, m))).astype(int)

    rows, labels, npc_per_sample = [], [], []
    for sc in range(n_scen):
        c = counts[sc]
        v_ego = rng.uniform(8.0, 20.0)
        lanes = rng.integers(-1, 2, c)
        gap = rng.uniform(-60.0, 120.0, c)
        v_npc = np.maximum(0.0, v_ego + rng.normal(0.0, 1.0, c) * spread)
        heading = rng.normal(0.0, 0.02)
        for step in range(length):
            closing = np.zeros(c)
            ttc = np.full(c, np.inf)
            same = lanes == 0
            ahead = same & (gap > 0)
            behind = same & (gap <= 0)
            closing[ahead] = v_ego - v_npc[ahead]
            closing[behind] = v_npc[behind] - v_ego
            hit = same & (closing > 0)
            ttc[hit] = np.maximum(np.abs(gap[hit]) - car_len, 0.0) / closing[hit]
            tte = float(np.clip(ttc.min() if c else np.inf, 0.0, tte_max))

            front = np.where(ahead)[0]
            rear = np.where(behind)[0]
            f = front[np.argmin(gap[front])] if front.size else None
            r = rear[np.argmax(gap[rear])] if rear.size else None
            dist = np.hypot(gap, 3.5 * lanes)
            near = int(np.argmin(dist)) if c else None
            rows.append([
                v_ego,
                heading,
                v_ego * dt * step,
                c,
                int(same.sum()),
                gap[f] if f is not None else 150.0,
                v_ego - v_npc[f] if f is not None else 0.0,
                -gap[r] if r is not None else 150.0,
                v_npc[r] - v_ego if r is not None else 0.0,
                dist[near] if near is not None else 150.0,
                lanes[near] if near is not None else 0.0,
                v_npc[near] if near is not None else v_ego,
                v_npc.mean() if c else v_ego,
                v_npc.std() if c else 0.0,
                np.abs(gap).mean() if c else 150.0,
                int((lanes == -1).sum()),
                int((lanes == 1).sum()),
                int(((gap > 0) & (gap < 50.0)).sum()),
                step,
            ])
            labels.append(tte)
            npc_per_sample.append(c)
            gap = gap + (v_npc - v_ego) * dt
    return {
        "features": np.asarray(rows, dtype=float)[:n],
        "tte": np.asarray(labels)[:n],
        "npc_counts": counts,
        "npc_per_sample": np.asarray(npc_per_sample)[:n],
    }


def generate_ads_dataset(system: SubjectSystem, n: int, seed: int) -> Dataset:
    """Driving scenarios labelled with the ego vehicle's time-to-collision.

    Each scenario draws its NPC count from a rounded, clipped-at-zero normal
    whose latent location/scale are solved so that the counts have mean
    ``npc_mean`` and standard deviation ``npc_std``. TTC comes from the
    closing speed to same-lane NPCs and is clipped to ``[0, tte_max]``.
    """
    sim = simulate_ads(system, n, seed)
    x, means, stds = _standardize(sim["features"])
    return Dataset(system, np.arange(n), x, _round9(sim["tte"]), seed=seed,
                   feature_means=means, feature_stds=stds)


GENERATORS = {"elevator": generate_elevator_dataset, "ads": generate_ads_dataset}


# --------------------------------------------------------------------------
# Scenario profiles
# --------------------------------------------------------------------------

_UP = {"traffic_intensity": 0.05, "lobby_fraction": 0.85, "start_hour": 8.5}
_LUNCH = {"traffic_intensity": 0.048, "lobby_fraction": 0.35, "start_hour": 12.25}

BUILTIN_SYSTEMS: dict[str, tuple[str, SubjectSystem]] = {
    "UpBest": ("elevator", SubjectSystem("UpBest", {"dispatcher_quality": 0.9}, _UP)),
    "UpWorse": ("elevator", SubjectSystem("UpWorse", {"dispatcher_quality": 0.4}, _UP)),
    "LunchBest": ("elevator", SubjectSystem("LunchBest", {"dispatcher_quality": 0.9}, _LUNCH)),
    "LunchWorse": ("elevator", SubjectSystem("LunchWorse", {"dispatcher_quality": 0.4}, _LUNCH)),
    "Simple": ("ads", SubjectSystem("Simple", {}, {"npc_mean": 4.81, "npc_std": 3.59})),
    "Complex": ("ads", SubjectSystem("Complex", {}, {"npc_mean": 6.51, "npc_std": 3.96})),
}


def builtin_system(name: str) -> tuple[str, SubjectSystem]:
    """``(domain, system)`` for one of the named scenario profiles."""
    try:
        return BUILTIN_SYSTEMS[name]
    except KeyError:
        raise ConfigurationError(f"unknown subject system {name!r}; known: {sorted(BUILTIN_SYSTEMS)}") from None


def pretraining_systems(domain: str, n_pairs: int, seed: int) -> list[tuple[SubjectSystem, SubjectSystem]]:
    """Randomised source/target system pairs, disjoint by name from the built-ins."""
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(n_pairs):
        pair = []
        for role in ("S", "T"):
            name = f"Pre{k + 1}{role}"
            if domain == "elevator":
                pair.append(SubjectSystem(
                    name,
                    {"dispatcher_quality": round(float(rng.uniform(0.2, 1.0)), 3)},
                    {
                        "traffic_intensity": round(float(rng.uniform(0.045, 0.06)), 4),
                        "lobby_fraction": round(float(rng.uniform(0.3, 0.9)), 3),
                        "start_hour": float(rng.choice([8.5, 12.25, 17.0])),
                    },
                ))
            elif domain == "ads":
                pair.append(SubjectSystem(name, {}, {
                    "npc_mean": round(float(rng.uniform(3.5, 7.5)), 2),
                    "npc_std": round(float(rng.uniform(3.0, 4.2)), 2),
                }))
            else:
                raise ConfigurationError(f"unknown domain {domain!r}")
        pairs.append(tuple(pair))
    return pairs


# --------------------------------------------------------------------------
# Windows
# --------------------------------------------------------------------------

def window_indices(n: int, ends: Sequence[int] | np.ndarray, omega: int) -> np.ndarray:
    """Sample indices of the windows ending at ``ends``; ``-1`` marks padding."""
    if omega < 1:
        raise ValueError(f"window length must be >= 1, got {omega}")
    ends = np.asarray(ends, dtype=np.int64).reshape(-1)
    if ends.size and (ends.min() < 0 or ends.max() >= n):
        raise IndexError(f"window end outside [0, {n})")
    idx = ends[:, None] + np.arange(-omega + 1, 1)[None, :]
    return np.where(idx >= 0, idx, -1)


def window(d: Dataset, i: int, omega: int) -> list[Sample]:
    """The ``omega`` samples ending at index ``i``, left-padded with zero samples."""
    if omega < 1:
        raise ValueError(f"window length must be >= 1, got {omega}")
    if not 0 <= i < len(d):
        raise IndexError(f"index {i} out of range for dataset of length {len(d)}")
    pad = Sample(-1, (0.0,) * d.F, 0.0, padding=True)
    return [d[j] if j >= 0 else pad for j in window_indices(len(d), [i], omega)[0]]


# --------------------------------------------------------------------------
# CSV codec
# --------------------------------------------------------------------------

def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def save_dataset(d: Dataset, path: str | Path) -> None:
    """Write ``d`` as CSV plus a ``<name>.meta.json`` sidecar."""
    path = Path(path)
    header = ["t"] + [f"f{j}" for j in range(d.F)] + ["tte"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, x, y in zip(d.t, d.features, d.tte):
            w.writerow([str(int(t))] + [f"{v:.9g}" for v in x] + [f"{y:.9g}"])
    with open(_meta_path(path), "w", encoding="utf-8") as fh:
        json.dump(d.metadata(), fh, indent=2)
        fh.write("\n")


def _parse_float(s: str, row: int, col: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise ParseError(f"unparseable {col} value {s!r} at row {row}") from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite {col} value at row {row}")
    return v


def load_dataset(path: str | Path) -> Dataset:
    """Read a dataset written by :func:`save_dataset` (sidecar optional).

    Without a sidecar the features are z-scored on load.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = rows[0]
    F = len(header) - 2
    expected = ["t"] + [f"f{j}" for j in range(F)] + ["tte"]
    if F < 1 or header != expected:
        raise ParseError(f"{path}: malformed header {header!r}; expected 't,f0,...,f{{F-1}},tte'")
    ts, xs, ys = [], [], []
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != F + 2:
            raise ParseError(f"{path}: expected {F + 2} fields at row {r}, got {len(row)}")
        try:
            t = int(row[0])
        except ValueError:
            raise ParseError(f"{path}: unparseable t at row {r}") from None
        if ts and t <= ts[-1]:
            raise ParseError(f"non-monotone t at row {r}")
        x = [_parse_float(v, r, f"f{j}") for j, v in enumerate(row[1:-1])]
        y = _parse_float(row[-1], r, "tte")
        if y < 0:
            raise ParseError(f"negative tte at row {r}")
        ts.append(t)
        xs.append(x)
        ys.append(y)
    if not ts:
        raise ParseError(f"{path}: no samples")
    x = np.asarray(xs, dtype=float)

    meta_file = _meta_path(path)
    if meta_file.exists():
        meta: dict[str, Any] = json.loads(meta_file.read_text(encoding="utf-8"))
        if int(meta.get("F", F)) != F:
            raise ParseError(f"{meta_file}: F={meta['F']} does not match CSV width {F}")
        system = SubjectSystem(meta.get("system_name") or path.stem,
                               meta.get("cps_params") or {}, meta.get("env_params") or {})
        return Dataset(system, np.asarray(ts), x, np.asarray(ys), seed=meta.get("seed"),
                       feature_means=meta.get("feature_means"), feature_stds=meta.get("feature_stds"))
    x, means, stds = _standardize(x)
    return Dataset(SubjectSystem(path.stem), np.asarray(ts), x, np.asarray(ys),
                   feature_means=means, feature_stds=stds)
