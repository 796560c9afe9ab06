"""Expanding-variate datasets: synthetic generation, variable partitioning,
sliding windows, z-score normalization and the manifest/CSV file format."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import Rng

PARTITION_MODES = ("area", "spatial", "internal")


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending key."""


@dataclass(frozen=True)
class SplitSpec:
    train1: tuple[int, int]
    train2: tuple[int, int]
    valid: tuple[int, int]
    test: tuple[int, int]

    def validate(self, t_total: int, expansion_step: int) -> None:
        ranges = [self.train1, self.train2, self.valid, self.test]
        prev_end = 0
        for a, b in ranges:
            if a < prev_end or b < a:
                raise ConfigError(f"split ranges overlap or are unordered: {ranges}")
            prev_end = b
        if prev_end > t_total:
            raise ConfigError(f"splits exceed series length {t_total}")
        if self.train1[1] != expansion_step:
            raise ConfigError("train1 must end at the expansion step")

    @property
    def train(self) -> tuple[int, int]:
        return (self.train1[0], self.train2[1])


@dataclass
class EvtsDataset:
    """Time x variable matrix with an expansion schedule.

    ``activation[v]`` is the first step at which variable ``v`` is observed
    (0 for continual variables). ``expansion_steps`` lists the distinct
    nonzero activation steps in increasing order.
    """

    values: np.ndarray
    observed: np.ndarray
    steps_per_day: int
    activation: np.ndarray
    splits: SplitSpec
    coords: np.ndarray | None = None
    variable_names: list[str] = field(default_factory=list)
    stats: tuple[np.ndarray, np.ndarray] | None = None
    truth: np.ndarray | None = None

    def __post_init__(self):
        if not self.variable_names:
            self.variable_names = [f"v{i}" for i in range(self.n_vars)]

    @property
    def t_total(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    @property
    def v1(self) -> np.ndarray:
        return np.flatnonzero(self.activation == 0)

    @property
    def expanding(self) -> np.ndarray:
        return np.flatnonzero(self.activation > 0)

    @property
    def expansion_steps(self) -> list[int]:
        return sorted({int(a) for a in self.activation if a > 0})

    @property
    def expansion_step(self) -> int:
        return self.expansion_steps[0]

    def active_at(self, start: int) -> np.ndarray:
        """Variables observed at every step from ``start`` onward."""
        return np.flatnonzero(self.activation <= start)

    def fully_observed(self) -> "EvtsDataset":
        """Counterfactual copy with every variable observed from step 0."""
        if self.truth is None:
            raise ConfigError("dataset carries no ground truth for unobserved cells")
        full = replace(self, values=self.truth.copy(), observed=np.ones_like(self.observed),
                       activation=np.zeros_like(self.activation), stats=None)
        full.stats = fit_stats(full)
        return full


@dataclass
class WindowSample:
    inputs: np.ndarray
    targets: np.ndarray
    variable_ids: np.ndarray
    ref_time: int

    @property
    def n(self) -> int:
        return len(self.variable_ids)


def _mask_from_activation(t_total: int, activation: np.ndarray) -> np.ndarray:
    return np.arange(t_total)[:, None] >= activation[None, :]


def partition_variables(coords: np.ndarray | None, mode: str, n_continual: int,
                        rng: Rng | None = None, n_total: int | None = None,
                        anchor: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Split variables into (continual, expanding) index arrays.

    ``area`` keeps the ``n_continual`` sensors with the smallest x coordinate,
    ``spatial`` keeps those nearest to ``anchor`` (drawn from ``rng`` when not
    given) and ``internal`` samples a uniform random subset.
    """
    if mode not in PARTITION_MODES:
        raise ConfigError(f"partition: unknown mode {mode!r}")
    if coords is not None:
        n_total = len(coords)
    if n_total is None:
        raise ConfigError("partition: need coords or n_total")
    if not 1 <= n_continual < n_total:
        raise ConfigError(f"partition: n_continual must be in [1, {n_total}), got {n_continual}")
    if mode in ("area", "spatial") and coords is None:
        raise ConfigError(f"partition: mode {mode!r} requires coordinates")
    if mode == "area":
        order = np.lexsort((np.arange(n_total), coords[:, 0]))
    elif mode == "spatial":
        if anchor is None:
            anchor = int(rng.np.integers(n_total))
        dist = np.linalg.norm(coords - coords[anchor], axis=1)
        order = np.lexsort((np.arange(n_total), dist))
    else:
        order = rng.np.permutation(n_total)
    return np.sort(order[:n_continual]), np.sort(order[n_continual:])


def generate_synthetic(n_continual: int = 8, n_expanding: int = 4, steps_per_day: int = 24,
                       days_p1: int = 30, days_p2: int = 3, days_valid: int = 2,
                       days_test: int = 7, rng: Rng | None = None, *,
                       partition: str = "spatial", coupling: float = 0.6,
                       persistence: float = 0.9, latent_noise: float = 1.0,
                       obs_noise: float = 0.3, length_scale: float = 30.0,
                       amp_range: tuple[float, float] = (2.0, 6.0),
                       level_range: tuple[float, float] = (10.0, 30.0),
                       n_expansions: int = 1) -> EvtsDataset:
    """Simulate sensors on a 100 km square whose latent state diffuses over a
    Gaussian-affinity graph, plus a per-sensor daily sinusoid and noise.

    With ``n_expansions > 1`` the expanding sensors are activated in equal
    consecutive groups spread evenly over P2.
    """
    for key, val in dict(n_continual=n_continual, n_expanding=n_expanding,
                         steps_per_day=steps_per_day, days_p1=days_p1, days_p2=days_p2,
                         days_valid=days_valid, days_test=days_test,
                         n_expansions=n_expansions).items():
        if val < 1:
            raise ConfigError(f"{key} must be >= 1, got {val}")
    if days_p2 > 0.2 * days_p1:
        raise ConfigError(f"days_p2 must be <= 0.2 * days_p1 ({days_p2} > {0.2 * days_p1})")
    if n_expansions > n_expanding:
        raise ConfigError("n_expansions cannot exceed n_expanding")
    rng = rng or Rng(0)
    n = n_continual + n_expanding
    spd = steps_per_day
    p1 = days_p1 * spd
    p2 = days_p2 * spd
    t_total = (days_p1 + days_p2 + days_valid + days_test) * spd

    geo = rng.stream("geometry").np
    coords = geo.uniform(0.0, 100.0, size=(n, 2))
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
    affinity = np.exp(-d2 / length_scale ** 2)
    np.fill_diagonal(affinity, 0.0)
    deg = affinity.sum(1, keepdims=True)
    walk = np.divide(affinity, deg, out=np.zeros_like(affinity), where=deg > 0)
    mix = (1.0 - coupling) * np.eye(n) + coupling * walk

    season = rng.stream("season").np
    amp = season.uniform(*amp_range, size=n)
    phase = season.uniform(0.0, 2.0 * math.pi, size=n)
    level = season.uniform(*level_range, size=n)

    noise = rng.stream("noise").np
    innov = noise.normal(0.0, 1.0, size=(t_total, n)) * latent_noise
    obs = noise.normal(0.0, 1.0, size=(t_total, n)) * obs_noise
    latent = np.zeros((t_total, n))
    state = np.zeros(n)
    for t in range(t_total):
        state = persistence * (mix @ state) + mix @ innov[t]
        latent[t] = state
    slot = np.arange(t_total) % spd
    daily = amp[None, :] * np.sin(2.0 * math.pi * slot[:, None] / spd + phase[None, :])
    values = level[None, :] + daily + latent + obs

    v1, v_exp = partition_variables(coords, partition, n_continual, rng.stream("partition"))
    activation = np.zeros(n, dtype=np.int64)
    groups = np.array_split(v_exp, n_expansions)
    for g, ids in enumerate(groups):
        activation[ids] = p1 + (g * p2) // n_expansions
    observed = _mask_from_activation(t_total, activation)
    splits = SplitSpec(train1=(0, p1), train2=(p1, p1 + p2),
                       valid=(p1 + p2, p1 + p2 + days_valid * spd),
                       test=(p1 + p2 + days_valid * spd, t_total))
    ds = EvtsDataset(values=np.where(observed, values, np.nan), observed=observed,
                     steps_per_day=spd, activation=activation, splits=splits, coords=coords,
                     truth=values)
    splits.validate(t_total, ds.expansion_step)
    ds.stats = fit_stats(ds)
    return ds


def fit_stats(ds: EvtsDataset, stats_range: tuple[int, int] | None = None):
    """Per-variable (mean, std) from the training range, using only observed
    cells: train1 for continual variables, train2 for expanding ones."""
    a, b = stats_range or ds.splits.train
    block = ds.values[a:b]
    seen = ds.observed[a:b]
    counts = seen.sum(0)
    if (counts == 0).any():
        empty = [ds.variable_names[i] for i in np.flatnonzero(counts == 0)]
        raise ConfigError(f"normalization range [{a}, {b}) has no observations for {empty}")
    filled = np.where(seen, block, 0.0)
    mean = filled.sum(0) / counts
    var = (np.where(seen, block - mean, 0.0) ** 2).sum(0) / counts
    std = np.maximum(np.sqrt(var), 1e-6)
    return mean, std


def normalize(ds: EvtsDataset, stats_range: tuple[int, int] | None = None) -> EvtsDataset:
    stats = fit_stats(ds, stats_range) if stats_range is not None or ds.stats is None else ds.stats
    mean, std = stats
    return replace(ds, values=(ds.values - mean) / std, stats=stats)


def denormalize(values: np.ndarray, stats, variable_ids: np.ndarray) -> np.ndarray:
    """Map z-scored ``values`` (rows aligned with ``variable_ids``) back to physical units."""
    mean, std = stats
    ids = np.asarray(variable_ids)
    shape = (-1,) + (1,) * (values.ndim - 1)
    return values * std[ids].reshape(shape) + mean[ids].reshape(shape)


def make_windows(ds: EvtsDataset, split_range: tuple[int, int], H: int = 12,
                 Q: int = 12) -> list[WindowSample]:
    """All stride-1 windows of ``H + Q`` steps inside ``split_range``.

    Each window carries the variables observed over its whole span, so windows
    straddling an expansion boundary fall back to the earlier variable set.
    """
    if H < 1 or Q < 1:
        raise ConfigError(f"H and Q must be >= 1, got H={H}, Q={Q}")
    a, b = split_range
    out = []
    for start in range(a, b - H - Q + 1):
        ids = ds.active_at(start)
        block = ds.values[start:start + H + Q, ids].T
        out.append(WindowSample(inputs=np.ascontiguousarray(block[:, :H]),
                                targets=np.ascontiguousarray(block[:, H:]),
                                variable_ids=ids, ref_time=start + H - 1))
    return out


def save_dataset(ds: EvtsDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mean, std = ds.stats if ds.stats is not None else fit_stats(ds)
    manifest = {
        "steps_per_day": ds.steps_per_day,
        "t_total": ds.t_total,
        "expansion_steps": ds.expansion_steps,
        "variable_ids": ds.variable_names,
        "v1": [ds.variable_names[i] for i in ds.v1],
        "activation": [int(a) for a in ds.activation],
        "coords": None if ds.coords is None else ds.coords.tolist(),
        "splits": {k: list(getattr(ds.splits, k)) for k in ("train1", "train2", "valid", "test")},
        "normalization": {"mean": mean.tolist(), "std": std.tolist()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    with open(out / "values.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ds.variable_names)
        for t in range(ds.t_total):
            w.writerow([repr(float(x)) if ok else "" for x, ok in zip(ds.values[t], ds.observed[t])])


def load_dataset(data_dir: str | Path) -> EvtsDataset:
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    with open(d / "values.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0]
    if names != manifest["variable_ids"]:
        raise ConfigError("values.csv header does not match manifest variable_ids")
    cells = rows[1:]
    values = np.array([[float(c) if c != "" else np.nan for c in r] for r in cells])
    observed = np.array([[c != "" for c in r] for r in cells])
    activation = np.asarray(manifest["activation"], dtype=np.int64)
    if not np.array_equal(observed, _mask_from_activation(len(cells), activation)):
        raise ConfigError("values.csv observation pattern disagrees with manifest activation")
    coords = None if manifest["coords"] is None else np.asarray(manifest["coords"])
    sp = manifest["splits"]
    splits = SplitSpec(**{k: tuple(v) for k, v in sp.items()})
    norm = manifest["normalization"]
    return EvtsDataset(values=values, observed=observed, steps_per_day=manifest["steps_per_day"],
                       activation=activation, splits=splits, coords=coords, variable_names=names,
                       stats=(np.asarray(norm["mean"]), np.asarray(norm["std"])))
