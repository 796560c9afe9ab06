"""Training loop, imbalance strategies, ablations and evaluation metrics."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import ConfigError, EvtsDataset, WindowSample, denormalize, make_windows, normalize
from .flat import FlatBatch, flatten
from .focal import (AugmentConfig, augment, focal_contrastive_loss, focal_temperatures,
                    forecast_mae, mixup, similarity)
from .model import StevModel
from .numerics import AdamState, Rng, adam_step
from .stfe import GraphOperator, ModelConfig

log = logging.getLogger(__name__)

VARIANTS = ("flats", "flats_cl", "flats_nf", "focal")
STRATEGIES = ("stev", "fptm", "oversample", "augment")
GROUPS = ("continual", "expanding", "overall")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    patience: int = 10
    max_epochs: int = 150
    tau: float = 0.5
    alpha: float = 0.3
    variant: str = "focal"
    strategy: str = "stev"
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    cosine_sim: bool = False
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: expected one of {VARIANTS}, got {self.variant!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: expected one of {STRATEGIES}, got {self.strategy!r}")
        if self.strategy == "fptm" and self.variant != "flats":
            raise ConfigError("strategy: fptm trains without the contrastive term; use variant=flats")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        focal_temperatures([], self.tau, self.alpha)
        self.aug.validate()

    @property
    def H(self) -> int:
        return self.model.H

    @property
    def Q(self) -> int:
        return self.model.Q

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- metrics

def delta_gap(e_model: float, e_oracle: float) -> float:
    """Relative gap to the oracle reference: (E - E_oracle) / E_oracle."""
    if not e_oracle > 0:
        raise ValueError(f"oracle error must be positive, got {e_oracle}")
    return (e_model - e_oracle) / e_oracle


def afmae(mae_new: float, mae_old: float) -> float:
    """Average forgetting MAE; negative means the retrained model improved
    on the old variables."""
    return mae_new - mae_old


@dataclass
class MetricsReport:
    groups: dict[str, dict[str, float] | None]
    strategy: str = "stev"
    variant: str = "focal"
    seed: int = 0
    alpha: float | None = None
    delta: dict[str, dict[str, float]] | None = None
    afmae: float | None = None
    curves: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def with_oracle(self, oracle: "MetricsReport") -> "MetricsReport":
        delta = {}
        for g, m in self.groups.items():
            o = oracle.groups.get(g)
            if m is None or o is None:
                continue
            delta[g] = {"mae": delta_gap(m["mae"], o["mae"]), "rmse": delta_gap(m["rmse"], o["rmse"])}
        return replace(self, delta=delta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        return cls(**doc)

    def csv_rows(self) -> list[dict]:
        rows = []
        for g in GROUPS:
            m = self.groups.get(g)
            d = (self.delta or {}).get(g, {})
            rows.append({
                "strategy": self.strategy, "variant": self.variant,
                "alpha": "" if self.alpha is None else self.alpha, "seed": self.seed, "group": g,
                "mae": "" if m is None else m["mae"], "rmse": "" if m is None else m["rmse"],
                "delta_mae": d.get("mae", ""), "delta_rmse": d.get("rmse", ""),
                "afmae": "" if self.afmae is None else self.afmae,
            })
        return rows


CSV_FIELDS = ["strategy", "variant", "alpha", "seed", "group", "mae", "rmse",
              "delta_mae", "delta_rmse", "afmae"]
CURVE_FIELDS = ["epoch", "train_loss", "train_cl", "val_mae"]


def write_reports(reports: Sequence[MetricsReport], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    docs = [r.to_dict() for r in reports]
    (out / "metrics.json").write_text(json.dumps(docs[0] if len(docs) == 1 else docs, indent=2) + "\n")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerows(r.csv_rows())


def write_curves(curves: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for c in curves:
            w.writerow({k: "" if c.get(k) is None else c[k] for k in CURVE_FIELDS})


def group_metrics(errors: np.ndarray, expanding_rows: np.ndarray) -> dict[str, dict | None]:
    """MAE/RMSE per group from a (cells x Q) error matrix and a per-row flag."""
    out = {}
    for g, sel in (("continual", ~expanding_rows), ("expanding", expanding_rows),
                   ("overall", np.ones_like(expanding_rows))):
        e = errors[sel]
        if e.size == 0:
            out[g] = None
            continue
        out[g] = {"mae": float(np.abs(e).mean()), "rmse": float(np.sqrt((e ** 2).mean()))}
    return out


# ---------------------------------------------------------------- evaluation

def predict(model: StevModel, windows: Sequence[WindowSample], v1, batch_size: int = 16,
            pad_to=None) -> list[np.ndarray]:
    """Normalized forecasts, one (n x Q) matrix per window, in evaluation mode."""
    outs = []
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            batch = windows[i:i + batch_size]
            flat = flatten(batch, v1, pad_to=pad_to)
            y = model.forecast(flat, training=False).numpy()
            for b, s in enumerate(batch):
                rows = y[flat.subgraph_slice(b)]
                if flat.loss_mask is not None:
                    rows = rows[flat.loss_mask[flat.subgraph_slice(b)]]
                order = np.argsort(np.argsort(s.variable_ids, kind="stable"), kind="stable")
                outs.append(rows[order])
    return outs


def evaluate(model: StevModel, ds: EvtsDataset, split: str = "test", H: int = 12, Q: int = 12,
             variables: Sequence[int] | None = None, batch_size: int = 16) -> MetricsReport:
    """Group-wise MAE/RMSE in physical units over ``split`` windows.

    ``variables`` restricts evaluation to a subset (e.g. the pre-expansion
    set); the model then sees only those variables in each window.
    """
    rng_ = getattr(ds.splits, split)
    nds = normalize(ds)
    norm_w = make_windows(nds, rng_, H, Q)
    raw_w = make_windows(ds, rng_, H, Q)
    if variables is not None:
        keep = np.asarray(sorted(variables))
        norm_w = [_restrict(w, keep) for w in norm_w]
        raw_w = [_restrict(w, keep) for w in raw_w]
    if not norm_w:
        raise ConfigError(f"split {split!r} is shorter than H + Q = {H + Q}")
    preds = predict(model, norm_w, ds.v1, batch_size)
    errs, flags = [], []
    expanding = set(ds.expanding.tolist())
    for p, w in zip(preds, raw_w):
        errs.append(denormalize(p, nds.stats, w.variable_ids) - w.targets)
        flags.append(np.array([v in expanding for v in w.variable_ids]))
    return MetricsReport(groups=group_metrics(np.concatenate(errs), np.concatenate(flags)))


def _restrict(w: WindowSample, keep: np.ndarray) -> WindowSample:
    sel = np.isin(w.variable_ids, keep)
    return WindowSample(w.inputs[sel], w.targets[sel], w.variable_ids[sel], w.ref_time)


def validation_mae(model: StevModel, nds: EvtsDataset, windows: Sequence[WindowSample],
                   raw_targets: Sequence[np.ndarray], batch_size: int = 16) -> float:
    preds = predict(model, windows, nds.v1, batch_size)
    total, count = 0.0, 0
    for p, w, y in zip(preds, windows, raw_targets):
        e = np.abs(denormalize(p, nds.stats, w.variable_ids) - y)
        total += e.sum()
        count += e.size
    return total / count


# ---------------------------------------------------------------- training

@dataclass
class EarlyStopping:
    """Tracks the best validation score; ``update`` returns True to stop."""

    patience: int
    best: float = math.inf
    best_epoch: int = 0
    best_state: dict | None = None
    bad_epochs: int = 0

    def update(self, epoch: int, score: float, state_fn: Callable[[], dict]) -> bool:
        if score < self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            self.best_state = state_fn()
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    model: StevModel
    curves: list[dict]
    best_epoch: int
    epochs_run: int


def training_pool(nds: EvtsDataset, cfg: TrainConfig, rng: Rng) -> list[WindowSample]:
    """Windows from train1 and train2 pooled together, plus strategy extras."""
    pool = make_windows(nds, nds.splits.train, cfg.H, cfg.Q)
    n_all = nds.n_vars
    post = [w for w in pool if w.n == n_all]
    if cfg.strategy == "oversample":
        pool = pool + [copy.copy(w) for w in post]
    elif cfg.strategy == "augment":
        expanding = set(nds.expanding.tolist())
        extra = []
        r = rng.stream("augment-pool")
        for w in post:
            partner = r.np.integers(0, w.n, size=w.n)
            x, y = mixup(w.inputs, partner, cfg.aug.mixup_beta, r, w.targets)
            exp_rows = np.array([v in expanding for v in w.variable_ids])
            x = np.where(exp_rows[:, None], x, w.inputs)
            y = np.where(exp_rows[:, None], y, w.targets)
            extra.append(WindowSample(x, y, w.variable_ids, w.ref_time))
        pool = pool + extra
    return pool


def batch_loss(model: StevModel, flat: FlatBatch, cfg: TrainConfig, rng: Rng | None = None,
               aug_rows: np.ndarray | None = None):
    """Joint objective on one flat batch; returns (loss, contrastive term or None)."""
    op = GraphOperator(model.holistic_graph(flat))
    h = model.features(flat, op, training=True)
    y_hat = model.head(h)
    y = torch.as_tensor(flat.targets)
    mae = forecast_mae(y_hat, y, flat.loss_mask)
    if cfg.variant == "flats":
        return mae, None
    if aug_rows is None:
        aug_rows = augment(flat, cfg.aug, rng)
    h_aug = model.features(flat, op, rows=aug_rows, training=True)
    alpha = cfg.alpha if cfg.variant == "focal" else 1.0
    tau_vec = focal_temperatures(flat.expanding, cfg.tau, alpha)
    sim = similarity(model.proj(h), model.proj(h_aug), cfg.cosine_sim)
    l_cl = focal_contrastive_loss(sim, tau_vec, flat.subgraph_id,
                                  filter_negatives=cfg.variant != "flats_cl")
    return l_cl + mae, l_cl


def train(ds: EvtsDataset, cfg: TrainConfig, pool: list[WindowSample] | None = None,
          valid_vars: Sequence[int] | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on shuffled mixed-shape batches with early stopping on validation
    MAE (physical units); returns the best-validation parameters."""
    cfg.validate()
    rng = Rng(cfg.seed)
    nds = normalize(ds)
    if pool is None:
        pool = training_pool(nds, cfg, rng)
    if not pool:
        raise ConfigError("training range yields no windows")
    valid = make_windows(nds, nds.splits.valid, cfg.H, cfg.Q)
    valid_raw = make_windows(ds, ds.splits.valid, cfg.H, cfg.Q)
    if valid_vars is not None:
        keep = np.asarray(sorted(valid_vars))
        valid = [_restrict(w, keep) for w in valid]
        valid_raw = [_restrict(w, keep) for w in valid_raw]
    valid_targets = [w.targets for w in valid_raw]
    pad_to = np.arange(ds.n_vars) if cfg.strategy == "fptm" else None

    model = StevModel(cfg.model, ds.n_vars, ds.steps_per_day, rng.stream("init"))
    params = dict(model.named_parameters())
    names = list(params)
    state = AdamState()
    stopper = EarlyStopping(cfg.patience)
    curves = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.stream(f"shuffle/{epoch}").np.permutation(len(pool))
        losses, cls = [], []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [pool[i] for i in order[start:start + cfg.batch_size]]
            flat = flatten(batch, ds.v1, pad_to=pad_to)
            loss, l_cl = batch_loss(model, flat, cfg, rng.stream(f"aug/{epoch}/{step}"))
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
            grads = {n: torch.zeros_like(params[n]) if g is None else g
                     for n, g in zip(names, grads)}
            adam_step(params, grads, state, lr=cfg.lr)
            losses.append(loss.item())
            if l_cl is not None:
                cls.append(l_cl.item())
        val = validation_mae(model, nds, valid, valid_targets)
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation MAE at epoch {epoch}")
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "train_cl": float(np.mean(cls)) if cls else None, "val_mae": float(val)}
        curves.append(row)
        log.info("epoch %d loss %.4f val_mae %.4f", epoch, row["train_loss"], val)
        if on_epoch is not None:
            on_epoch(row)
        if stopper.update(epoch, val, lambda: copy.deepcopy(model.state_dict())):
            break
    model.load_state_dict(stopper.best_state)
    return TrainResult(model=model, curves=curves, best_epoch=stopper.best_epoch, epochs_run=epoch)


def run_strategy(ds: EvtsDataset, cfg: TrainConfig, oracle: MetricsReport | None = None,
                 split: str = "test") -> tuple[MetricsReport, TrainResult]:
    result = train(ds, cfg)
    report = evaluate(result.model, ds, split, cfg.H, cfg.Q)
    report = replace(report, strategy=cfg.strategy, variant=cfg.variant, seed=cfg.seed,
                     alpha=cfg.alpha if cfg.variant == "focal" else None,
                     curves=result.curves, config=cfg.to_dict())
    if oracle is not None:
        report = report.with_oracle(oracle)
    return report, result


def run_oracle(ds: EvtsDataset, cfg: TrainConfig) -> tuple[MetricsReport, TrainResult]:
    """Same model trained on the counterfactual fully observed dataset."""
    full = ds.fully_observed()
    result = train(full, cfg)
    report = evaluate(result.model, full, "test", cfg.H, cfg.Q)
    report = replace(report, strategy="oracle", variant=cfg.variant, seed=cfg.seed,
                     curves=result.curves, config=cfg.to_dict())
    return report, result


def train_pre_expansion(ds: EvtsDataset, cfg: TrainConfig) -> TrainResult:
    """Model that only ever sees train1 and the continual variables."""
    nds = normalize(ds)
    pool = make_windows(nds, nds.splits.train1, cfg.H, cfg.Q)
    return train(ds, replace(cfg, strategy="stev"), pool=pool, valid_vars=ds.v1)


def forgetting(new_model: StevModel, old_model: StevModel, ds: EvtsDataset,
               H: int = 12, Q: int = 12) -> tuple[float, float, float]:
    """(AFMAE, MAE_NEW, MAE_OLD) on the continual variables of the test split."""
    new = evaluate(new_model, ds, "test", H, Q, variables=ds.v1).groups["overall"]["mae"]
    old = evaluate(old_model, ds, "test", H, Q, variables=ds.v1).groups["overall"]["mae"]
    return afmae(new, old), new, old


def ablation_configs(base: TrainConfig, seeds: Sequence[int],
                     alphas: Sequence[float] | None = None) -> list[TrainConfig]:
    """The variant ladder for every seed, or the focal alpha sweep when
    ``alphas`` is given."""
    cells = []
    for seed in seeds:
        if alphas is None:
            cells += [replace(base, variant=v, strategy="stev", seed=seed) for v in VARIANTS]
        else:
            cells += [replace(base, variant="focal", strategy="stev", alpha=a, seed=seed)
                      for a in alphas]
    return cells


def run_ablation(ds: EvtsDataset, base: TrainConfig, seeds: Sequence[int] = (0,),
                 alphas: Sequence[float] | None = None,
                 oracle: MetricsReport | None = None) -> list[MetricsReport]:
    if not seeds:
        raise ConfigError("seeds: need at least one seed")
    if alphas is not None:
        for a in alphas:
            if not 0 < a <= 1:
                raise ConfigError(f"sweep_alpha: values must be in (0, 1], got {a}")
    reports = []
    for cell in ablation_configs(base, seeds, alphas):
        log.info("ablation cell variant=%s alpha=%s seed=%d", cell.variant, cell.alpha, cell.seed)
        report, _ = run_strategy(ds, cell, oracle)
        if alphas is not None:
            report = replace(report, alpha=cell.alpha)
        reports.append(report)
    return reports
