"""Training loop: cross-entropy, RAdam, learning-rate schedulers, checkpoints."""
from __future__ import annotations

import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import data as D
from .backbone import read_weights, write_weights
from .tensor import FormatError, Module, ShapeError, Tensor, no_grad, read_tensor, record, write_tensor

OPT_MAGIC = b"OPT1"
METRICS_HEADER = "epoch,train_loss,train_acc,val_acc,lr,seconds"


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class, stabilised by max subtraction."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in 0..{k - 1}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sumexp = ez.sum(axis=1)
    rows = np.arange(n)
    loss = (np.log(sumexp) - z[rows, labels]).mean()

    def backward(g):
        grad = ez / sumexp[:, None]
        grad[rows, labels] -= 1
        return (grad * (g.reshape(()) / n),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", backward)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class RAdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def radam_terms(s: RAdamState, t: int) -> tuple[float, float | None]:
    """Return (rho_t, rectification r_t or None when the variance is not tractable)."""
    rho_inf = 2.0 / (1.0 - s.beta2) - 1.0
    b2t = s.beta2 ** t
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    if rho_t <= 4.0:
        return rho_t, None
    r = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
    return rho_t, r


def radam_step(params: Sequence[Tensor], s: RAdamState):
    """One rectified-Adam update of ``params`` in place; missing grads count as zero."""
    if not s.m:
        s.m = [np.zeros_like(p.data) for p in params]
        s.v = [np.zeros_like(p.data) for p in params]
    if len(s.m) != len(params) or any(m.shape != p.shape for m, p in zip(s.m, params)):
        raise ShapeError("optimizer state does not match the parameter list")
    s.step += 1
    t = s.step
    _, r = radam_terms(s, t)
    bc1 = 1.0 - s.beta1 ** t
    bc2 = 1.0 - s.beta2 ** t
    for p, m, v in zip(params, s.m, s.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * (g * g)
        m_hat = m / bc1
        if r is None:
            p.data -= s.lr * m_hat
        else:
            p.data -= s.lr * r * m_hat / (np.sqrt(v / bc2) + s.eps)


# ---------------------------------------------------------------------------
# schedulers


@dataclass
class SchedulerState:
    kind: str = "plateau"
    factor: float = 0.1
    patience: int = 3
    step_period: int = 10
    min_lr: float = 1e-6
    mode: str = "max"
    best: float | None = None
    bad_epochs: int = 0
    epochs: int = 0

    def __post_init__(self):
        if self.kind not in ("plateau", "step"):
            raise ValueError(f"unknown scheduler kind {self.kind!r}")
        if self.mode not in ("max", "min"):
            raise ValueError("plateau mode must be 'max' or 'min'")


def scheduler_epoch_end(s: SchedulerState, lr: float, metric: float) -> float:
    """Advance the scheduler by one epoch and return the learning rate for the next one."""
    s.epochs += 1
    if s.kind == "step":
        if s.epochs % s.step_period == 0:
            lr = max(lr * s.factor, s.min_lr)
        return lr
    improved = s.best is None or (metric > s.best if s.mode == "max" else metric < s.best)
    if improved:
        s.best = metric
        s.bad_epochs = 0
        return lr
    s.bad_epochs += 1
    if s.bad_epochs >= s.patience:
        s.bad_epochs = 0
        lr = max(lr * s.factor, s.min_lr)
    return lr


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    min_lr: float = 1e-6
    scheduler: str = "plateau"
    patience: int = 3
    step_period: int = 10
    lr_factor: float = 0.1
    plateau_metric: str = "val_acc"
    seed: int = 0
    augment: bool = True
    hflip_prob: float = 0.5
    rotation: tuple[float, float] = (-30.0, 30.0)
    drop_last: bool = False
    eval_batch_size: int = 128
    record_time: bool = False
    stop_at_train_acc: float | None = None


@dataclass
class Metrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float
    seconds: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.train_loss:.6g},{self.train_acc:.6g},{self.val_acc:.6g},{self.lr:.6g},{self.seconds:.6g}"


def metrics_csv(history: Sequence[Metrics]) -> str:
    return "\n".join([METRICS_HEADER] + [m.csv_row() for m in history]) + "\n"


@dataclass
class TrainState:
    opt: RAdamState
    sched: SchedulerState
    epoch: int = 0
    history: list = field(default_factory=list)


def new_state(tcfg: TrainConfig) -> TrainState:
    mode = "max" if tcfg.plateau_metric == "val_acc" else "min"
    sched = SchedulerState(tcfg.scheduler, tcfg.lr_factor, tcfg.patience, tcfg.step_period, tcfg.min_lr, mode)
    return TrainState(RAdamState(lr=tcfg.lr), sched)


def augmented_epoch(samples: Sequence[D.Sample], tcfg: TrainConfig, target, epoch: int) -> list[D.Sample]:
    if not tcfg.augment:
        return D.prepare(samples, target)
    acfg = D.AugmentConfig(tcfg.hflip_prob, tuple(tcfg.rotation), tuple(target))
    rng = np.random.default_rng([tcfg.seed, epoch, 0xA6])
    return [D.augment(s, acfg, rng) for s in samples]


def train_epoch(model: Module, samples: Sequence[D.Sample], opt: RAdamState, tcfg: TrainConfig,
                epoch: int = 0) -> tuple[float, float]:
    """One pass over ``samples``; returns (mean training loss, training accuracy)."""
    params = model.parameters()
    target = model.cfg.input_size
    total_loss, correct, seen = 0.0, 0, 0
    model.train()
    for x, y in D.batches(augmented_epoch(samples, tcfg, target, epoch), tcfg.batch_size,
                          tcfg.seed, tcfg.drop_last, epoch):
        model.zero_grad()
        logits = model(x, True)
        loss = cross_entropy(logits, y)
        loss.backward()
        radam_step(params, opt)
        total_loss += loss.item() * len(y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
        seen += len(y)
    return total_loss / seen, correct / seen


def predict(model: Module, samples: Sequence[D.Sample], batch_size: int = 128) -> np.ndarray:
    model.eval()
    preds = []
    with no_grad():
        for x, _ in D.batches(D.prepare(samples, model.cfg.input_size), batch_size):
            preds.append(model(x, False).data.argmax(axis=1))
    return np.concatenate(preds)


def evaluate(model: Module, samples: Sequence[D.Sample], batch_size: int = 128) -> float:
    labels = np.array([s.label for s in samples])
    return float((predict(model, samples, batch_size) == labels).mean())


def fit(model: Module, train_samples, val_samples, tcfg: TrainConfig, state: TrainState | None = None,
        on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Train until ``tcfg.epochs`` (resuming from ``state`` if given)."""
    state = new_state(tcfg) if state is None else state
    while state.epoch < tcfg.epochs:
        t0 = time.perf_counter()
        lr = state.opt.lr
        loss, acc = train_epoch(model, train_samples, state.opt, tcfg, state.epoch)
        val_acc = evaluate(model, val_samples, tcfg.eval_batch_size) if val_samples else float("nan")
        state.epoch += 1
        seconds = time.perf_counter() - t0 if tcfg.record_time else 0.0
        state.history.append(Metrics(state.epoch, loss, acc, val_acc, lr, seconds))
        metric = val_acc if tcfg.plateau_metric == "val_acc" else loss
        state.opt.lr = scheduler_epoch_end(state.sched, lr, metric)
        if on_epoch is not None:
            on_epoch(state)
        if tcfg.stop_at_train_acc is not None and acc >= tcfg.stop_at_train_acc:
            break
    return state


# ---------------------------------------------------------------------------
# checkpoints: TSEW weights followed by an optimizer section


def write_checkpoint(stream, model: Module, state: TrainState):
    write_weights(model, stream)
    meta = {
        "epoch": state.epoch,
        "opt": {k: getattr(state.opt, k) for k in ("lr", "beta1", "beta2", "eps", "step")},
        "sched": asdict(state.sched),
        "history": [asdict(m) for m in state.history],
    }
    raw = json.dumps(meta, sort_keys=True).encode()
    stream.write(OPT_MAGIC)
    stream.write(struct.pack("<I", len(raw)))
    stream.write(raw)
    stream.write(struct.pack("<I", len(state.opt.m)))
    for m, v in zip(state.opt.m, state.opt.v):
        write_tensor(stream, m)
        write_tensor(stream, v)


def save_checkpoint(path, model: Module, state: TrainState):
    buf = io.BytesIO()
    write_checkpoint(buf, model, state)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_checkpoint(stream, model: Module) -> TrainState | None:
    """Load weights into ``model``; return the training state if the optimizer section is present."""
    read_weights(model, stream)
    magic = stream.read(4)
    if not magic:
        return None
    if magic != OPT_MAGIC:
        raise FormatError("unexpected trailing data after weights")
    head = stream.read(4)
    if len(head) != 4:
        raise FormatError("truncated optimizer section")
    (n,) = struct.unpack("<I", head)
    raw = stream.read(n)
    if len(raw) != n:
        raise FormatError("truncated optimizer section")
    meta = json.loads(raw)
    head = stream.read(4)
    if len(head) != 4:
        raise FormatError("truncated optimizer section")
    (count,) = struct.unpack("<I", head)
    ms, vs = [], []
    for _ in range(count):
        ms.append(read_tensor(stream).copy())
        vs.append(read_tensor(stream).copy())
    opt = RAdamState(**meta["opt"], m=ms, v=vs)
    sched = SchedulerState(**meta["sched"])
    history = [Metrics(**h) for h in meta["history"]]
    return TrainState(opt, sched, meta["epoch"], history)


def load_checkpoint(path, model: Module) -> TrainState | None:
    with open(path, "rb") as f:
        return read_checkpoint(io.BytesIO(f.read()), model)
