"""Training loop: AdamW, warmup + cosine schedule, LDS-weighted loss, checkpoints.

Each batch member gets its own forward pass and tape; leaf gradients
accumulate across tapes in member order and are divided by the batch size
before the update. In 64-bit mode with a single BLAS thread the whole run,
including resume from a checkpoint, is bit-reproducible.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigError, TrainingError, ValidationError
from .lds import LdsWeightTable, weighted_mse
from .metrics import evaluate_dataset
from .model import PRECISIONS, Model, ModelConfig
from .tensor import Tensor, backward

log = logging.getLogger("routecloud.trainer")


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 10
    base_lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 4
    seed: int = 0
    precision: str = "f64"
    lds: bool = True
    grad_clip: float = 5.0  # global norm; None or 0 disables
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lds_bin_width: float = 0.001
    verification: bool = False  # disables clipping for exact-math checks

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")

    @property
    def clip(self):
        return None if self.verification or not self.grad_clip else float(self.grad_clip)

    def to_dict(self):
        return asdict(self)


@dataclass
class Schedule:
    """Step-level view of the epoch-based schedule."""

    total_steps: int
    warmup_steps: int
    base_lr: float

    @classmethod
    def from_config(cls, config, steps_per_epoch):
        return cls(config.epochs * steps_per_epoch, config.warmup_epochs * steps_per_epoch, config.base_lr)


def lr_at(step, schedule):
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    s = schedule
    if step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    span = max(s.total_steps - s.warmup_steps, 1)
    t = min((step - s.warmup_steps) / span, 1.0)
    return s.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam with decoupled weight decay: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * (update + self.weight_decay * p.data)).astype(p.data.dtype)


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


@dataclass
class TrainResult:
    model: Model
    checkpoint: Checkpoint
    history: list
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)


def split_indices(n, val_fraction, seed):
    """Seeded train/validation split; the validation set has ``round(n * val_fraction)`` samples."""
    n_val = int(round(n * val_fraction))
    if n_val >= n:
        n_val = n - 1
    perm = np.random.default_rng([seed, 1]).permutation(n)
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def _batch_loss(model, batch, inputs, table):
    """Forward + backward over every member; returns per-member losses and averaged grads."""
    model.zero_grad()
    losses = []
    for i in batch:
        loss = weighted_mse(model.forward(inputs[i]), inputs.labels[i], table)
        value = loss.item()
        losses.append(value)
        if not math.isfinite(value):
            return losses, None
        backward(loss)
    B = float(len(batch))
    grads = {k: (p.grad / B if p.grad is not None else None) for k, p in model.params.items()}
    return losses, grads


class _Prepared:
    """Encoder inputs and label arrays computed once per sample."""

    def __init__(self, model, samples):
        self.items = [model.prepare(s.nodes) for s in samples]
        self.labels = [np.asarray(s.label.values, dtype=model.dtype) for s in samples]
        self.names = [s.name for s in samples]

    def __getitem__(self, i):
        return self.items[i]


def _dump_nan(out_dir, samples, batch, losses, step):
    names = [samples[i].name for i in batch]
    msg = f"non-finite loss at step {step}: batch {names}, member losses {losses}"
    if out_dir is not None:
        path = Path(out_dir) / "nan_batch.npz"
        arrays = {f"{samples[i].name}.nodes": samples[i].nodes.as_array() for i in batch}
        arrays.update({f"{samples[i].name}.label": samples[i].label.values for i in batch})
        np.savez(path, **arrays)
        msg += f"; batch dumped to {path}"
    return msg


def evaluate_model(model, samples, prepared=None):
    preds = [model.predict(prepared[i] if prepared else s.nodes) for i, s in enumerate(samples)]
    return evaluate_dataset(preds, [s.label for s in samples], [s.name for s in samples])


def _json_state(rng):
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {"state": str(st["state"]["state"]), "inc": str(st["state"]["inc"])},
            "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}


def _restore_rng(doc):
    rng = np.random.default_rng()
    rng.bit_generator.state = {
        "bit_generator": doc["bit_generator"],
        "state": {"state": int(doc["state"]["state"]), "inc": int(doc["state"]["inc"])},
        "has_uint32": doc["has_uint32"], "uinteger": doc["uinteger"],
    }
    return rng


def _snapshot(model):
    return {k: p.data.copy() for k, p in model.params.items()}


def train(samples, model_config=None, config=None, out_dir=None, resume=None, stop_after_epoch=None,
          max_steps=None):
    """Train on ``samples`` (list of ``Sample``) and return a ``TrainResult``.

    Parameters
    ----------
    resume : Checkpoint or path, optional
        Continue a run saved by an earlier call; configuration comes from it.
    stop_after_epoch : int, optional
        Stop (and checkpoint) once this many epochs have completed.
    max_steps : int, optional
        Hard cap on optimizer steps, for step-counted harnesses.

    The checkpoint keeps both the current and the best-validation parameters;
    the returned model carries the best ones (or the current ones when no
    validation split exists).
    """
    if not samples:
        raise ValidationError("empty dataset")
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else Checkpoint.load(resume)
        model_config = ModelConfig.from_dict(ckpt.config["model"])
        config = TrainConfig(**ckpt.config["train"])
    model_config = model_config or ModelConfig.desk()
    config = config or TrainConfig()
    W, H = model_config.encoder.base_resolution
    for s in samples:
        if s.label.values.shape != (H, W):
            raise ValidationError(f"{s.name}: label {s.label.values.shape} does not match model {H}x{W}")

    train_idx, val_idx = split_indices(len(samples), config.val_fraction, config.seed)
    train_set = [samples[i] for i in train_idx]
    val_set = [samples[i] for i in val_idx]
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    schedule = Schedule.from_config(config, steps_per_epoch)

    model = Model(model_config, seed=config.seed, precision=config.precision)
    opt = AdamW(model.params, config.beta1, config.beta2, config.eps, config.weight_decay)
    if config.lds:
        table = LdsWeightTable.from_labels([s.label for s in train_set], config.lds_bin_width)
    else:
        table = None
    rng = np.random.default_rng([config.seed, 2])
    history, step, epoch = [], 0, 0
    best_score, best_params = -math.inf, None

    if resume is not None:
        if ckpt.state.get("split") != [train_idx, val_idx]:
            raise ValidationError("dataset does not match the checkpoint's split")
        for k, p in model.params.items():
            p.data = ckpt.params[k].copy()
            opt.m[k] = ckpt.adam_m[k].copy()
            opt.v[k] = ckpt.adam_v[k].copy()
        st = ckpt.state
        opt.t, step, epoch = st["adam_t"], st["step"], st["epoch"]
        rng = _restore_rng(st["rng"])
        history = list(st["history"])
        best_score = st["best_score"] if st["best_score"] is not None else -math.inf
        best_params = {k: v.copy() for k, v in ckpt.best_params.items()} or None
        if table is not None and ckpt.lds:
            table = LdsWeightTable.from_arrays(ckpt.lds)

    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    prep = _Prepared(model, train_set)
    val_prep = [model.prepare(s.nodes) for s in val_set]

    def checkpoint():
        state = {
            "step": step, "epoch": epoch, "adam_t": opt.t, "rng": _json_state(rng),
            "history": history, "split": [train_idx, val_idx],
            "best_score": None if best_score == -math.inf else best_score,
        }
        return Checkpoint(
            {"model": model_config.to_dict(), "train": config.to_dict()},
            _snapshot(model), best_params or {}, {k: v.copy() for k, v in opt.m.items()},
            {k: v.copy() for k, v in opt.v.items()}, table.to_arrays() if table else {}, state,
        )

    stopped = False
    while epoch < config.epochs:
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            stopped = True
            break
        if max_steps is not None and step >= max_steps:
            break
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        losses = []
        for b in range(steps_per_epoch):
            if max_steps is not None and step >= max_steps:
                break
            batch = order[b * config.batch_size:(b + 1) * config.batch_size].tolist()
            member_losses, grads = _batch_loss(model, batch, prep, table)
            if grads is None:
                raise TrainingError(_dump_nan(out_dir, train_set, batch, member_losses, step))
            clip = config.clip
            if clip is not None:
                norm = global_norm({k: g for k, g in grads.items() if g is not None})
                if norm > clip:
                    f = clip / norm
                    grads = {k: (g * f if g is not None else None) for k, g in grads.items()}
            step += 1
            opt.step(grads, lr_at(step, schedule))
            model.zero_grad()
            losses.append(float(np.mean(member_losses)))
        epoch += 1
        record = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)) if losses else None,
                  "lr": lr_at(step, schedule), "seconds": None}
        if val_set:
            rep = evaluate_dataset([model.predict(x) for x in val_prep], [s.label for s in val_set])
            record.update({f"val_{k}": v for k, v in rep.means.items()})
            score = rep.means["pearson"]
            if score > best_score:
                best_score, best_params = score, _snapshot(model)
        record["seconds"] = round(time.perf_counter() - t0, 3)
        history.append(record)
        log.info("epoch %d/%d loss %.6f lr %.2e%s", epoch, config.epochs, record["loss"] or float("nan"),
                 record["lr"], f" val_pearson {record.get('val_pearson', float('nan')):.4f}" if val_set else "")

    ckpt = checkpoint()
    if out_dir is not None:
        ckpt.save(Path(out_dir) / "model.cfck")
    final = Model(model_config, precision=config.precision,
                  params={k: Tensor(v, requires_grad=True) for k, v in (best_params or _snapshot(model)).items()})
    return TrainResult(final, ckpt, history, stopped_early=stopped,
                       extra={"train_names": [s.name for s in train_set], "val_names": [s.name for s in val_set],
                              "current": model})


def loss_gradients(model, sample, table=None):
    """Gradients of one sample's (optionally LDS-weighted) loss; handy for inspection."""
    model.zero_grad()
    loss = weighted_mse(model.forward(sample.nodes), sample.label, table)
    backward(loss)
    grads = {k: p.grad.copy() for k, p in model.params.items() if p.grad is not None}
    model.zero_grad()
    return loss.item(), grads
