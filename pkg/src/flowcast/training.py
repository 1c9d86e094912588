"""Loss, metrics, Adam, the training loop, and checkpoint serialization."""

from __future__ import annotations

import struct
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import (ContractError, DimensionError, DivergenceError,
                     FormatError)
from .model import Model, collate

MAPE_MASK_THRESHOLD = 1e-3


def l1_loss(pred: T.Tensor, target: T.Tensor) -> T.Tensor:
    """Mean absolute error as a differentiable scalar, raw scale."""
    if pred.shape != target.shape:
        raise DimensionError(
            f"loss shapes disagree: {pred.shape} vs {target.shape}")
    return T.mean(T.abs_(pred - target))


def metrics(preds: np.ndarray, targets: np.ndarray) -> tuple[float, float, float]:
    """Raw-scale (MAE, RMSE, MAPE%) over all elements.

    MAPE ignores targets with |y| below a small threshold, in both the
    numerator and the denominator count; if everything is masked the MAPE
    is NaN and a warning is issued.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise DimensionError(
            f"metric shapes disagree: {preds.shape} vs {targets.shape}")
    err = np.abs(preds - targets)
    mae = float(err.mean())
    rmse = float(np.sqrt((err * err).mean()))
    keep = np.abs(targets) >= MAPE_MASK_THRESHOLD
    if not keep.any():
        warnings.warn("every target is below the MAPE mask threshold; "
                      "reporting MAPE as NaN", RuntimeWarning)
        mape = float("nan")
    else:
        mape = float((err[keep] / np.abs(targets[keep])).mean() * 100.0)
    return mae, rmse, mape


def _batches(windows, batch_size: int):
    for start in range(0, len(windows), batch_size):
        yield windows[start:start + batch_size]


def predict_batches(model: Model, windows, batch_size: int = 64,
                    threads: int = 1) -> np.ndarray:
    """Raw-scale predictions for every window, in order, without taping.

    With threads > 1 batches run concurrently; the forward pass only reads
    parameters, so the result is element-for-element the sequential one.
    """
    chunks = list(_batches(windows, batch_size))

    def run(chunk):
        x, _, ti, di, to, do = collate(chunk)
        return model.forward(x, ti, di, to, do).data

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(chunk) for chunk in chunks]
    return np.concatenate(outs, axis=0)


def evaluate(model: Model, windows, batch_size: int = 64,
             threads: int = 1) -> tuple[float, float, float]:
    """(MAE, RMSE, MAPE%) of the model over a window list."""
    preds = predict_batches(model, windows, batch_size, threads)
    targets = np.stack([w.y for w in windows]).astype(np.float64)
    return metrics(preds, targets)


# -- optimizer -----------------------------------------------------------------

class Adam:
    """Adam with bias correction over a named parameter registry."""

    def __init__(self, params: dict[str, T.Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise ContractError(f"no gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- training loop -------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    val_rmse: float
    val_mape: float
    seconds: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_val_mae: float
    stopped_early: bool


HISTORY_HEADER = "epoch,train_loss,val_mae,val_rmse,val_mape,seconds"


def history_to_csv(history: list[EpochRecord]) -> str:
    lines = [HISTORY_HEADER]
    for r in history:
        lines.append(f"{r.epoch},{r.train_loss:.6f},{r.val_mae:.6f},"
                     f"{r.val_rmse:.6f},{r.val_mape:.6f},{r.seconds:.3f}")
    return "\n".join(lines) + "\n"


def train(model: Model, train_windows, val_windows, *, lr: float = 0.001,
          batch_size: int = 64, patience: int = 10, max_epochs: int = 100,
          seed: int = 0, timing: str = "wall",
          log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Seeded minibatch training with best-on-validation early stopping.

    Stops once validation MAE has gone `patience` consecutive epochs
    without strict improvement, or at max_epochs. The model is left holding
    the best parameters, which are also returned as a state dict.
    """
    if not train_windows or not val_windows:
        raise ContractError("train and validation splits must be non-empty")
    if batch_size < 1 or patience < 1 or max_epochs < 1:
        raise ContractError("batch_size, patience, and max_epochs must be >= 1")
    if timing not in ("wall", "none"):
        raise ContractError(f"unknown timing mode {timing!r}")

    params = model.named_parameters()
    adam = Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    order = np.arange(len(train_windows))

    history: list[EpochRecord] = []
    best_state: dict[str, np.ndarray] = {}
    best_mae = float("inf")
    best_epoch = 0
    stale = 0
    stopped_early = False

    for epoch in range(1, max_epochs + 1):
        t0 = time.perf_counter()
        rng.shuffle(order)
        loss_sum = 0.0
        seen = 0
        for b, start in enumerate(range(0, len(order), batch_size)):
            chunk = [train_windows[i] for i in order[start:start + batch_size]]
            x, y, ti, di, to, do = collate(chunk)
            with T.Tape():
                pred = model.forward(x, ti, di, to, do)
                loss = l1_loss(pred, T.Tensor(y.astype(np.float64)))
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(
                        f"loss is not finite at epoch {epoch}, batch {b}")
                T.backward(loss)
            adam.step()
            adam.zero_grad()
            loss_sum += value * len(chunk)
            seen += len(chunk)

        val_mae, val_rmse, val_mape = evaluate(model, val_windows, batch_size)
        seconds = time.perf_counter() - t0 if timing == "wall" else 0.0
        record = EpochRecord(epoch, loss_sum / seen, val_mae, val_rmse,
                             val_mape, seconds)
        history.append(record)
        if log is not None:
            log(f"epoch {epoch}: train_loss={record.train_loss:.6f} "
                f"val_mae={val_mae:.6f} val_rmse={val_rmse:.6f} "
                f"val_mape={val_mape:.6f}")

        if val_mae < best_mae:
            best_mae = val_mae
            best_epoch = epoch
            best_state = {k: p.data.copy() for k, p in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                stopped_early = True
                break

    load_state(model, best_state)
    return TrainResult(history, best_state, best_epoch, best_mae, stopped_early)


def load_state(model: Model, state: dict[str, np.ndarray]) -> None:
    """Copy a state dict into the model, validating names and shapes."""
    params = model.named_parameters()
    missing = sorted(set(params) - set(state))
    extra = sorted(set(state) - set(params))
    if missing or extra:
        raise ContractError(
            f"state does not match model: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        arr = np.asarray(state[name])
        if arr.shape != p.data.shape:
            raise ContractError(
                f"parameter {name!r} shape mismatch: checkpoint "
                f"{arr.shape} vs model {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)


# -- checkpoint format ---------------------------------------------------------

CKPT_MAGIC = b"STDC"
CKPT_VERSION = 1
CKPT_DTYPE_F64 = 1
_CKPT_HEADER = struct.Struct("<4sBBI")


def save_checkpoint(path: str, state: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays: header, then length-prefixed entries."""
    blob = bytearray(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION,
                                       CKPT_DTYPE_F64, len(state)))
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        blob += struct.pack("<H", len(raw))
        blob += raw
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError("checkpoint shorter than header", offset=len(raw))
    magic, version, dtype, count = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    if dtype != CKPT_DTYPE_F64:
        raise FormatError(f"unsupported checkpoint dtype tag {dtype}", offset=5)
    pos = _CKPT_HEADER.size
    state: dict[str, np.ndarray] = {}

    def need(n: int, what: str) -> None:
        if pos + n > len(raw):
            raise FormatError(f"checkpoint truncated reading {what}",
                              offset=len(raw))

    for _ in range(count):
        need(2, "name length")
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        need(name_len, "name")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        need(1, "rank")
        rank = raw[pos]
        pos += 1
        need(4 * rank, "dims")
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64)) if rank else 8
        need(n_bytes, f"payload of {name!r}")
        state[name] = np.frombuffer(
            raw, dtype="<f8", count=n_bytes // 8, offset=pos
        ).reshape(shape).copy()
        pos += n_bytes
    if pos != len(raw):
        raise FormatError("trailing bytes after checkpoint payload", offset=pos)
    return state
