"""Shared feature extractor with a primary head and signed auxiliary/adversarial heads.

The joint objective is ``L_primary + sum_t alpha_t * L_t``. A positive weight
makes task t auxiliary, a negative one adversarial. Two ways of realizing a
negative weight are supported:

``grad-reversal`` (default)
    every head minimizes ``|alpha_t| * L_t``; the features reach adversarial
    heads through a gradient-reversal node, so the extractor is pushed to
    *increase* their loss while the heads keep trying to solve their task.
``signed-loss``
    the weighted sum is minimized literally; adversarial heads then learn to
    misclassify, which is kept only for ablations.

Heads with ``alpha_t == 0`` see detached features and never touch the extractor.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .manifest import Manifest
from .metrics import dcorr2, one_hot, top1_accuracy

log = logging.getLogger(__name__)

MODES = ("grad-reversal", "signed-loss")
LAMBDA_GRID = (0.1, 0.25, 0.5, 1.0)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} in epoch {epoch}")
        self.epoch = epoch


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per named consumer, so adding a head never shifts another's draws."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass
class HeadSpec:
    family: str
    n_classes: int
    weight: float
    hidden: int = 64
    depth: int = 2


@dataclass
class ModelConfig:
    input_dim: int
    n_classes: int
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    feature_dim: int = 64
    heads: list[HeadSpec] = field(default_factory=list)

    def __post_init__(self):
        self.heads = [h if isinstance(h, HeadSpec) else HeadSpec(**h) for h in self.heads]
        dims = [self.input_dim, self.n_classes, self.feature_dim, *self.hidden]
        dims += [d for h in self.heads for d in (h.n_classes, h.hidden)]
        if any(int(d) <= 0 for d in dims):
            raise ValueError("all model dimensions must be positive")
        if len({h.family for h in self.heads}) != len(self.heads):
            raise ValueError("one head per family")

    @classmethod
    def wide(cls, input_dim: int, n_classes: int, heads: Sequence[HeadSpec]) -> "ModelConfig":
        heads = [HeadSpec(h.family, h.n_classes, h.weight, hidden=2048, depth=2) for h in heads]
        return cls(input_dim, n_classes, hidden=[2048], feature_dim=2048, heads=heads)

    def with_signs(self, signs: Mapping[str, int], magnitude: float | Mapping[str, float] = 0.5
                   ) -> "ModelConfig":
        """Copy whose head weights follow a sign recommendation, e.g. from NCA."""
        cfg = copy.deepcopy(self)
        for h in cfg.heads:
            mag = magnitude[h.family] if isinstance(magnitude, Mapping) else magnitude
            h.weight = float(signs[h.family]) * abs(float(mag))
        return cfg

    def weights(self) -> dict[str, float]:
        return {h.family: h.weight for h in self.heads}


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-2
    decay_factor: float = 10.0
    decay_every: int = 10
    patience: int = 3
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    mode: str = "grad-reversal"
    probe_family: str | None = "scene"
    probe_epochs: int = 100
    probe_lr: float = 0.1
    probe_size: int = 400

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.patience < 1 or self.batch_size < 2 or self.epochs < 1:
            raise ValueError("patience >= 1, batch_size >= 2 and epochs >= 1 required")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


def benchmark_train_config(seed: int = 0) -> TrainConfig:
    """Training settings used for the synthetic benchmark runs."""
    return TrainConfig(epochs=15, seed=seed)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    targets: dict[str, np.ndarray] = field(default_factory=dict)   # family -> n x K multi-hot
    single: dict[str, np.ndarray] = field(default_factory=dict)    # family -> one label id or -1
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError("x must be n x d with one primary label per row")

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], {k: v[idx] for k, v in self.targets.items()},
                       {k: v[idx] for k, v in self.single.items()},
                       tuple(np.asarray(self.ids)[idx]) if self.ids else ())

    @classmethod
    def from_manifest(cls, m: Manifest, features: np.ndarray, ids: Sequence[str] | None = None,
                      reference: Manifest | None = None) -> "Dataset":
        """Rows of ``features`` align with ``m.records``; ``ids`` selects a subset.

        Multi-label families are reduced to one representative label per record
        (most frequent within the record's class), computed on ``reference`` or ``m``.
        """
        from .splits import representatives

        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != len(m.records):
            raise ValueError(f"{features.shape[0]} feature rows for {len(m.records)} records")
        pos = m.index()
        rows = list(range(len(m.records))) if ids is None else [pos[i] for i in ids]
        recs = [m.records[i] for i in rows]
        u = m.universe
        targets, single = {}, {}
        for fam in u.aux_families:
            t = np.zeros((len(recs), u.size(fam)))
            for i, r in enumerate(recs):
                t[i, list(r.aux(fam))] = 1.0
            targets[fam] = t
            reps = representatives(m, fam, "most_frequent_in_class", reference)
            single[fam] = np.array([reps.get(r.id, -1) for r in recs], dtype=np.int64)
        return cls(features[rows], np.array([r.primary_label for r in recs]), targets, single,
                   tuple(r.id for r in recs))


class _Block:
    """Linear, batchnorm, ReLU."""

    def __init__(self, d_in: int, d_out: int, rng):
        self.linear = ad.Linear(d_in, d_out, rng)
        self.bn = ad.BatchNorm1d(d_out)

    def __call__(self, x):
        return ad.relu(self.bn(self.linear(x)))

    def modules(self):
        return [self.linear, self.bn]


class Head:
    def __init__(self, spec: HeadSpec, d_in: int, rng):
        self.spec = spec
        self.blocks = []
        d = d_in
        for _ in range(spec.depth):
            self.blocks.append(_Block(d, spec.hidden, rng))
            d = spec.hidden
        self.out = ad.Linear(d, spec.n_classes, rng, gain=1.0)

    def __call__(self, x):
        for b in self.blocks:
            x = b(x)
        return self.out(x)

    def modules(self):
        return [m for b in self.blocks for m in b.modules()] + [self.out]


class AMTNet:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = stream(seed, "extractor")
        self.blocks = []
        d = config.input_dim
        for width in config.hidden:
            self.blocks.append(_Block(d, width, rng))
            d = width
        self.feature_layer = ad.Linear(d, config.feature_dim, rng)
        self.primary = ad.Linear(config.feature_dim, config.n_classes, stream(seed, "primary"),
                                 gain=1.0)
        self.heads = {h.family: Head(h, config.feature_dim, stream(seed, f"head:{h.family}"))
                      for h in config.heads}

    # -- structure

    def named_modules(self) -> list[tuple[str, object]]:
        out = []
        for i, b in enumerate(self.blocks):
            out += [(f"extractor.{i}.linear", b.linear), (f"extractor.{i}.bn", b.bn)]
        out.append(("extractor.features", self.feature_layer))
        out.append(("primary", self.primary))
        for fam, head in self.heads.items():
            for j, mod in enumerate(head.modules()):
                out.append((f"head.{fam}.{j}", mod))
        return out

    def backbone_modules(self) -> list:
        return [m for b in self.blocks for m in b.modules()] + [self.feature_layer]

    def parameters(self) -> list[ad.Tensor]:
        return ad.collect(m for _, m in self.named_modules())

    def batchnorms(self) -> list[ad.BatchNorm1d]:
        return [m for _, m in self.named_modules() if isinstance(m, ad.BatchNorm1d)]

    def train(self, flag: bool = True) -> None:
        for bn in self.batchnorms():
            bn.training = flag

    def eval(self) -> None:
        self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, mod in self.named_modules():
            for p in mod.parameters():
                out[f"{name}.{p.name}"] = p.data.copy()
            for k, v in mod.state().items():
                out[f"{name}.{k}"] = v.copy()
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for name, mod in self.named_modules():
            for p in mod.parameters():
                p.data = np.array(state[f"{name}.{p.name}"], dtype=np.float64)
            if isinstance(mod, ad.BatchNorm1d):
                mod.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
                mod.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64)

    def save(self, path) -> None:
        meta = {"config": asdict(self.config)}
        ad.save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "AMTNet":
        state, meta = ad.load_checkpoint(path)
        model = cls(ModelConfig(**meta["config"]))
        model.load_state_dict(state)
        return model

    # -- computation

    def features(self, x) -> ad.Tensor:
        h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        if h.shape[0] == 0:
            raise ValueError("empty batch")
        if h.shape[1] != self.config.input_dim:
            raise ValueError(f"expected {self.config.input_dim} input features, got {h.shape[1]}")
        for b in self.blocks:
            h = b(h)
        return ad.relu(self.feature_layer(h))

    def forward(self, x, mode: str = "grad-reversal") -> tuple[ad.Tensor, dict[str, ad.Tensor]]:
        """Features and logits per task (``"primary"`` plus one entry per head family)."""
        f = self.features(x)
        logits = {"primary": self.primary(f)}
        for fam, head in self.heads.items():
            w = head.spec.weight
            if w == 0:
                inp = f.detach()
            elif w < 0 and mode == "grad-reversal":
                inp = ad.grad_reverse(f, 1.0)
            else:
                inp = f
            logits[fam] = head(inp)
        return f, logits

    def task_losses(self, logits: Mapping[str, ad.Tensor], batch: Dataset) -> dict[str, ad.Tensor]:
        losses = {"primary": ad.softmax_xent(logits["primary"], batch.y)}
        for fam in self.heads:
            losses[fam] = ad.sigmoid_bce(logits[fam], batch.targets[fam])
        return losses


def total_loss(losses: Mapping[str, ad.Tensor], weights: Mapping[str, float],
               mode: str = "grad-reversal") -> ad.Tensor:
    """``L_primary + sum alpha_t L_t``; in grad-reversal mode the weights enter as ``|alpha_t|``."""
    if "primary" not in losses:
        raise ValueError("primary loss missing")
    total = losses["primary"]
    for fam, loss in losses.items():
        if fam == "primary":
            continue
        w = weights.get(fam, 0.0)
        total = total + ad.scale(loss, abs(w) if mode == "grad-reversal" else w)
    return total


# ---------------------------------------------------------------------------
# optimizers

class Adam:
    def __init__(self, params: Sequence[ad.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: Sequence[ad.Tensor], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, b in zip(self.params, self.buf):
            if p.grad is None:
                continue
            b *= self.momentum
            b += p.grad
            p.data -= self.lr * b


# ---------------------------------------------------------------------------
# evaluation helpers

def recalibrate_batchnorm(model: AMTNet, x: np.ndarray) -> None:
    """Set every running statistic to the exact population statistic over ``x``."""
    model.train(True)
    saved = [(bn.momentum) for bn in model.batchnorms()]
    for bn in model.batchnorms():
        bn.momentum = 1.0
    try:
        model.forward(x)
    finally:
        for bn, mom in zip(model.batchnorms(), saved):
            bn.momentum = mom
        model.eval()


def extract(model: AMTNet, x: np.ndarray) -> np.ndarray:
    model.eval()
    return model.features(x).data


def linear_probe(train_x, train_y, test_x, test_y, n_classes: int, epochs: int = 100,
                 lr: float = 0.1) -> float:
    """Test accuracy of a softmax-regression probe fit by full-batch gradient descent.

    Features are standardized with the fit-set statistics first.
    """
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd[sd == 0] = 1.0
    a = (train_x - mu) / sd
    b = (test_x - mu) / sd
    w = np.zeros((a.shape[1], max(n_classes, 2)))
    c = np.zeros(w.shape[1])
    for _ in range(epochs):
        _, g = ad.softmax_xent_forward(a @ w + c, train_y)
        w -= lr * (a.T @ g)
        c -= lr * g.sum(axis=0)
    return top1_accuracy(b @ w + c, test_y)


@dataclass
class EpochReport:
    epoch: int
    lr: float
    train_loss: dict[str, float]
    val_loss: dict[str, float]
    train_acc: float
    val_acc: float
    probe_acc: float | None
    probe_dcorr2: float | None

    def row(self) -> dict:
        out = {"epoch": self.epoch, "lr": self.lr, "train_acc": self.train_acc,
               "val_acc": self.val_acc, "probe_acc": self.probe_acc,
               "probe_dcorr2": self.probe_dcorr2}
        out.update({f"train_loss_{k}": v for k, v in self.train_loss.items()})
        out.update({f"val_loss_{k}": v for k, v in self.val_loss.items()})
        return out


def write_reports_csv(path, reports: Sequence[EpochReport]) -> None:
    import csv

    rows = [r.row() for r in reports]
    keys = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                        for k, v in row.items()})


def _losses_eval(model: AMTNet, ds: Dataset) -> tuple[dict[str, float], float]:
    model.eval()
    _, logits = model.forward(ds.x)
    losses = {k: v.item() for k, v in model.task_losses(logits, ds).items()}
    return losses, top1_accuracy(logits["primary"].data, ds.y)


def _probe(model: AMTNet, probe: Dataset, family: str, cfg: TrainConfig):
    labels = probe.single.get(family)
    if labels is None:
        return None, None
    keep = np.flatnonzero(labels >= 0)
    if keep.size > cfg.probe_size:
        # evenly spaced rows, so class-sorted data is still covered
        keep = keep[np.linspace(0, keep.size - 1, cfg.probe_size).round().astype(int)]
    if keep.size < 4:
        return None, None
    f = extract(model, probe.x[keep])
    y = labels[keep]
    k = int(probe.targets[family].shape[1])
    fit, test = np.arange(0, keep.size, 2), np.arange(1, keep.size, 2)
    acc = linear_probe(f[fit], y[fit], f[test], y[test], k, cfg.probe_epochs, cfg.probe_lr)
    return acc, dcorr2(f, one_hot(y, k))


@dataclass
class TrainResult:
    model: AMTNet
    reports: list[EpochReport]
    best_epoch: int
    final_state: dict[str, np.ndarray]


def _batches(n: int, batch_size: int, perm: np.ndarray) -> list[np.ndarray]:
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and out[-1].size < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def train(model: AMTNet, cfg: TrainConfig, train_set: Dataset, val_set: Dataset,
          probe_set: Dataset | None = None, on_epoch=None) -> TrainResult:
    """Minibatch training; returns the model restored to its best-validation epoch."""
    if len(train_set) < 2 or len(val_set) == 0:
        raise ValueError("need >= 2 training samples and a nonempty validation set")
    if train_set.x.shape[1] != model.config.input_dim:
        raise ValueError("feature width does not match the model")
    probe_set = val_set if probe_set is None else probe_set
    weights = model.config.weights()
    params = model.parameters()
    if cfg.optimizer == "adam":
        opt = Adam(params, cfg.lr)
    else:
        opt = SGD(params, cfg.lr, cfg.momentum)
    shuffle = stream(cfg.seed, "shuffle")
    reports: list[EpochReport] = []
    best_acc, best_epoch, best_state = -1.0, 0, model.state_dict()
    plateau_best, stale = -1.0, 0
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        model.train(True)
        for idx in _batches(n, cfg.batch_size, shuffle.permutation(n)):
            batch = train_set.take(idx)
            for p in params:
                p.zero_grad()
            _, logits = model.forward(batch.x, cfg.mode)
            loss = total_loss(model.task_losses(logits, batch), weights, cfg.mode)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(epoch, loss.item())
            loss.backward()
            opt.step()
        recalibrate_batchnorm(model, train_set.x)
        tr_loss, tr_acc = _losses_eval(model, train_set)
        va_loss, va_acc = _losses_eval(model, val_set)
        if not all(math.isfinite(v) for v in (*tr_loss.values(), *va_loss.values())):
            raise TrainingDiverged(epoch, float("nan"))
        p_acc, p_dc = (None, None)
        if cfg.probe_family:
            p_acc, p_dc = _probe(model, probe_set, cfg.probe_family, cfg)
        rep = EpochReport(epoch, opt.lr, tr_loss, va_loss, tr_acc, va_acc, p_acc, p_dc)
        reports.append(rep)
        log.info("epoch %d lr %.2e train %.4f val %.4f probe %s", epoch, opt.lr, tr_acc, va_acc,
                 "-" if p_acc is None else f"{p_acc:.4f}")
        if on_epoch is not None:
            on_epoch(rep)
        if va_acc > best_acc:
            best_acc, best_epoch, best_state = va_acc, epoch, model.state_dict()
        if cfg.optimizer == "adam":
            if epoch % cfg.decay_every == 0:
                opt.lr /= cfg.decay_factor
        else:
            if va_acc > plateau_best + 1e-3:
                plateau_best, stale = va_acc, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    opt.lr /= cfg.decay_factor
                    stale = 0
    final_state = model.state_dict()
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, reports, best_epoch, final_state)


def evaluate(model: AMTNet, ds: Dataset, adversarial_family: str | None = "scene") -> dict:
    """Eval-mode accuracies, losses, and feature dcorr^2 against one-hot family labels."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    model.eval()
    f, logits = model.forward(ds.x)
    out = {"n": len(ds), "accuracy": top1_accuracy(logits["primary"].data, ds.y),
           "loss": {k: v.item() for k, v in model.task_losses(logits, ds).items()},
           "task_accuracy": {}}
    for fam in model.heads:
        lab = ds.single.get(fam)
        if lab is not None and np.any(lab >= 0):
            keep = lab >= 0
            out["task_accuracy"][fam] = top1_accuracy(logits[fam].data[keep], lab[keep])
    if adversarial_family and adversarial_family in ds.single:
        lab = ds.single[adversarial_family]
        keep = lab >= 0
        k = ds.targets[adversarial_family].shape[1]
        out["dcorr2"] = dcorr2(f.data[keep], one_hot(lab[keep], k)) if keep.sum() >= 2 else None
    return out


def save_config(path, model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    Path(path).write_text(json.dumps({"model": asdict(model_cfg), "train": asdict(train_cfg)},
                                     indent=2, sort_keys=True))


def load_config(path) -> tuple[dict, TrainConfig]:
    """Model section stays a dict: input/class dims are usually filled in from data."""
    doc = json.loads(Path(path).read_text())
    return doc.get("model", {}), TrainConfig(**doc.get("train", {}))


@dataclass
class BenchmarkRun:
    weights: dict[str, float]
    val_acc: float
    probe_dcorr2: float
    result: TrainResult


def benchmark_datasets(spec) -> tuple[Dataset, Dataset, Dataset]:
    """Train, validation, and scene-balanced probe datasets for a synthetic spec."""
    from . import synthgen

    train_raw, val_raw = synthgen.generate(spec)
    probe_raw = synthgen.generate_probe(spec)
    m = synthgen.to_manifest(spec, train_raw, val_raw, probe_raw)
    x = np.vstack([train_raw.x, val_raw.x, probe_raw.x])
    ref = m.subset(train_raw.ids)
    return tuple(Dataset.from_manifest(m, x, ds.ids, reference=ref)
                 for ds in (train_raw, val_raw, probe_raw))


def run_benchmark(spec, weights: Mapping[str, float] | None = None,
                  cfg: TrainConfig | None = None, data=None) -> BenchmarkRun:
    """Train one model on the synthetic benchmark; ``weights=None`` means no extra heads."""
    cfg = cfg or benchmark_train_config(spec.seed)
    train_set, val_set, probe_set = data or benchmark_datasets(spec)
    sizes = {"scene": spec.n_scenes, "object": spec.n_objects}
    heads = [HeadSpec(fam, sizes[fam], w) for fam, w in (weights or {}).items()]
    model = AMTNet(ModelConfig(spec.input_dim, spec.n_actions, heads=heads), cfg.seed)
    res = train(model, cfg, train_set, val_set, probe_set)
    return BenchmarkRun(dict(weights or {}), evaluate(res.model, val_set)["accuracy"],
                        evaluate(res.model, probe_set)["dcorr2"], res)
