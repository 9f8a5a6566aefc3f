"""Weighted-MSE training, step learning-rate schedule, evaluation metrics and the ablation driver."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .dataset import Dataset
from .lattice import ConfigError
from .models import DESK_CHANNELS, ArchKind, Checkpoint, CPGAModel, ModelSpec, build_model

log = logging.getLogger(__name__)

THRESHOLDS = (0.6, 0.7, 0.8, 0.87)
WEIGHTS = (7.0, 6.0, 5.0, 4.0, 1.0)


class NumericError(RuntimeError):
    """Non-finite loss or metric during training."""


@dataclass(frozen=True)
class TrainConfig:
    arch: ArchKind = ArchKind.LATE_FILM
    epochs: int = 100
    batch_size: int = 16
    base_lr: float = 3e-3
    lr_decay: float = 0.9
    lr_step: int = 10
    seed: int = 0
    thresholds: tuple[float, ...] = THRESHOLDS
    weights: tuple[float, ...] = WEIGHTS
    channels: tuple[int, ...] = DESK_CHANNELS
    dropout: float = 0.4
    scale_output: bool = True  # predict mean + std * head output, from the train targets
    device: str = "cpu"

    def __post_init__(self):
        object.__setattr__(self, "arch", ArchKind.parse(self.arch))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ConfigError("wMSE thresholds must be strictly increasing")
        if len(self.weights) != len(self.thresholds) + 1:
            raise ConfigError("need one more wMSE weight than thresholds")
        if self.epochs < 1 or self.batch_size < 1 or not self.base_lr > 0:
            raise ConfigError("epochs, batch_size and base_lr must be positive")
        if self.lr_step < 1 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_step must be >= 1 and lr_decay in (0, 1]")

    def to_json(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.value
        for k in ("thresholds", "weights", "channels"):
            d[k] = list(d[k])
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- loss and schedule

def sample_weights(target, thresholds=THRESHOLDS, weights=WEIGHTS):
    """Per-sample wMSE weight; a target exactly on a threshold takes the band above it."""
    t = torch.as_tensor(target)
    edges = torch.tensor(thresholds, dtype=t.dtype)
    idx = torch.bucketize(t, edges, right=True)
    return torch.tensor(weights, dtype=t.dtype)[idx]


def wmse(pred, target, thresholds=THRESHOLDS, weights=WEIGHTS) -> torch.Tensor:
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.numel() == 0:
        raise ValueError("wmse of an empty batch")
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape")
    w = sample_weights(target, thresholds, weights)
    return (w * (pred - target) ** 2).mean()


def wmse_grad(pred, target, thresholds=THRESHOLDS, weights=WEIGHTS) -> np.ndarray:
    """d wmse / d pred = 2 w (pred - target) / N."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    w = sample_weights(torch.from_numpy(t), thresholds, weights).numpy()
    return 2.0 * w * (p - t) / p.size


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.base_lr * config.lr_decay ** (epoch // config.lr_step)


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    pcc: float
    r2: float
    mae: float
    rmse: float
    n: int
    ids: list[str] = field(default_factory=list)
    predictions: list[float] = field(default_factory=list)
    targets: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    @property
    def residuals(self) -> np.ndarray:
        return np.asarray(self.predictions) - np.asarray(self.targets)

    def summary(self) -> dict:
        return {"pcc": self.pcc, "r2": self.r2, "mae": self.mae, "rmse": self.rmse, "n": self.n}

    def to_json(self) -> dict:
        return {**self.summary(), "ids": self.ids, "predictions": self.predictions,
                "targets": self.targets, "residuals": self.residuals.tolist(), "history": self.history}

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        return cls(d["pcc"], d["r2"], d["mae"], d["rmse"], d["n"], list(d["ids"]), list(d["predictions"]),
                   list(d["targets"]), list(d.get("history", [])))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    denom = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b / denom) if denom > 0 else math.nan


def metrics(pred, target) -> dict:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    res = p - t
    ss_tot = float(((t - t.mean()) ** 2).sum())
    ss_res = float((res ** 2).sum())
    return {
        "pcc": pearson(p, t),
        "r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan,
        "mae": float(np.abs(res).mean()),
        "rmse": float(math.sqrt((res ** 2).mean())),
    }


def report(ids, pred, target, history=None) -> MetricsReport:
    m = metrics(pred, target)
    return MetricsReport(m["pcc"], m["r2"], m["mae"], m["rmse"], len(ids), list(ids),
                         [float(x) for x in pred], [float(x) for x in target], list(history or []))


# ---------------------------------------------------------------- tensors

@dataclass
class Tensors:
    numeric: torch.Tensor
    orig: torch.Tensor
    conv: torch.Tensor
    target: torch.Tensor
    ids: list[str]

    def batch(self, idx) -> tuple:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return self.numeric[idx], self.orig[idx], self.conv[idx], self.target[idx]

    def __len__(self) -> int:
        return len(self.ids)


def to_tensors(ds: Dataset, split: str | None = None) -> Tensors:
    """Standardized numeric features plus channels-last image volumes for one split."""
    idx = ds.split_index(split) if split else np.arange(len(ds.ids))
    vol = lambda a: torch.from_numpy(np.ascontiguousarray(a[idx], dtype=np.float32)).unsqueeze(1) \
        .contiguous(memory_format=torch.channels_last_3d)
    return Tensors(torch.from_numpy(ds.standardized()[idx].astype(np.float32)), vol(ds.original),
                   vol(ds.transformed), torch.from_numpy(ds.target[idx].astype(np.float32)),
                   [ds.ids[i] for i in idx])


@torch.no_grad()
def predict(model: CPGAModel, data: Tensors, batch_size: int = 32) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(data), batch_size):
            n, o, c, _ = data.batch(range(s, min(s + batch_size, len(data))))
            out.append(model(n, o, c).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    best_epoch: int
    val: MetricsReport
    seconds: float


def _stats_ref(ds: Dataset) -> dict:
    payload = json.dumps(ds.stats.to_json(), sort_keys=True).encode()
    return {"sha256": hashlib.sha256(payload).hexdigest()[:16], "n_fitted": len(ds.stats.fitted_on)}


def train(config: TrainConfig, ds: Dataset, progress=None) -> TrainResult:
    """Adam on mini-batches of the training split; keeps the weights with the lowest validation wMSE."""
    t0 = time.perf_counter()
    tr, va = to_tensors(ds, "train"), to_tensors(ds, "val")
    spec = ModelSpec(config.arch, config.channels, tuple(ds.original.shape[1:]), dropout=config.dropout)
    model = build_model(spec, config.seed).to(memory_format=torch.channels_last_3d)
    if config.scale_output:
        y = tr.target.double()
        model.set_output_affine(y.mean().item(), max(y.std(unbiased=False).item(), 1e-6))
    opt = torch.optim.Adam(model.parameters(), lr=config.base_lr)
    order_rng = np.random.default_rng(config.seed)
    loss_kw = {"thresholds": config.thresholds, "weights": config.weights}
    history, best = [], (math.inf, -1, None)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)  # dropout masks
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            for g in opt.param_groups:
                g["lr"] = lr
            model.train()
            order = order_rng.permutation(len(tr))
            total = 0.0
            for b, s in enumerate(range(0, len(order), config.batch_size)):
                n, o, c, y = tr.batch(order[s:s + config.batch_size])
                loss = wmse(model(n, o, c), y, **loss_kw)
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b} (lr={lr:g})")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(y)
            val_loss = float(wmse(torch.from_numpy(predict(model, va)), va.target.double(), **loss_kw))
            history.append({"epoch": epoch, "lr": lr, "train_loss": total / len(tr), "val_loss": val_loss})
            if val_loss < best[0]:
                best = (val_loss, epoch, copy.deepcopy(model.state_dict()))
            if progress is not None:
                progress(history[-1])
    if best[2] is None:
        raise NumericError("validation loss was never finite")
    model.load_state_dict(best[2])
    val = report(va.ids, predict(model, va), va.target.numpy(), history)
    ckpt = Checkpoint.from_model(model, arch=spec.arch.value, epoch=best[1], seed=config.seed,
                                 config_hash=config.config_hash(), train_config=config.to_json(),
                                 feature_stats=_stats_ref(ds), metrics=val.summary(), version=__version__)
    return TrainResult(ckpt, history, best[1], val, time.perf_counter() - t0)


def evaluate(checkpoint: Checkpoint | CPGAModel, ds: Dataset, split: str = "test") -> MetricsReport:
    model = checkpoint.to_model() if isinstance(checkpoint, Checkpoint) else checkpoint
    data = to_tensors(ds, split)
    history = checkpoint.metadata.get("history", []) if isinstance(checkpoint, Checkpoint) else []
    return report(data.ids, predict(model, data), data.target.numpy(), history)


# ---------------------------------------------------------------- ablation

@dataclass
class AblationTable:
    rows: list[dict]  # one per (arch, seed)
    summary: list[dict]  # mean/std per arch
    provenance: dict
    checkpoints: dict = field(default_factory=dict, repr=False)  # (arch, seed) -> Checkpoint, when kept

    def to_json(self) -> dict:
        return {"rows": self.rows, "summary": self.summary, "provenance": self.provenance}

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["arch", "n_seeds", "pcc", "r2", "mae", "rmse", "r2_std"]
        w = csv.DictWriter(buf, cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in self.summary:
            w.writerow(r)
        return buf.getvalue()

    def mean_r2(self, arch: str | ArchKind) -> float:
        a = ArchKind.parse(arch).value
        return next(r["r2"] for r in self.summary if r["arch"] == a)


def ablate(ds: Dataset, archs: Sequence[str | ArchKind], seeds: Sequence[int], base: TrainConfig = TrainConfig(),
           split: str = "test", progress=None, keep_checkpoints: bool = False) -> AblationTable:
    """Train every arch x seed and tabulate test metrics; timing is kept out of the table."""
    rows, kept = [], {}
    for a in archs:
        for s in seeds:
            cfg = TrainConfig(**{**base.to_json(), "arch": ArchKind.parse(a), "seed": int(s)})
            res = train(cfg, ds)
            m = evaluate(res.checkpoint, ds, split)
            rows.append({"arch": cfg.arch.value, "seed": int(s), "best_epoch": res.best_epoch, **m.summary()})
            if keep_checkpoints:
                kept[(cfg.arch.value, int(s))] = res.checkpoint
            if progress is not None:
                progress(rows[-1], res.seconds)
    summary = []
    for a in dict.fromkeys(r["arch"] for r in rows):
        sub = [r for r in rows if r["arch"] == a]
        agg = {k: float(np.mean([r[k] for r in sub])) for k in ("pcc", "r2", "mae", "rmse")}
        agg["r2_std"] = float(np.std([r["r2"] for r in sub]))
        summary.append({"arch": a, "n_seeds": len(sub), **agg})
    base_json = {k: v for k, v in base.to_json().items() if k not in ("arch", "seed")}
    prov = {"train_config": base_json, "seeds": [int(s) for s in seeds], "split": split,
            "dataset": ds.provenance, "version": __version__}
    return AblationTable(rows, summary, prov, kept)
