"""Loss, optimizer, and the mini-batch training loop.

The objective is pixel MSE plus an edge-energy regularizer: the mean
over channels and pixels of (y_out - y_hr)^2, plus lambda times the
mean of |grad y_out|^2, where the gradient magnitude comes from a
horizontal and a vertical 3x3 edge filter (one-pixel zero padding,
same convolution convention as the network). Both terms are averaged
over the batch. Optimization is ADAM with bias-corrected moments.

Epoch shuffles draw from a generator seeded by (seed, epoch), so a run
can be stopped and resumed with bitwise-identical results and two runs
with the same config are identical.
"""

from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model, ops
from .errors import ShapeError
from .model import ArchitectureSpec, ModelParams
from .ops import ConvLayer

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Horizontal-derivative kernel; its transpose is the vertical one.
EDGE_KERNEL = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    reg_lambda: float = 0.001
    batch_size: int = 64
    max_epochs: int = 100
    seed: int = 0
    validation_interval: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.reg_lambda < 0:
            raise ValueError(f"reg_lambda must be >= 0, got {self.reg_lambda}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.validation_interval < 1:
            raise ValueError(
                f"validation_interval must be >= 1, got {self.validation_interval}"
            )


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter array."""

    m: list
    v: list
    t: int = 0


def init_adam(params: ModelParams) -> AdamState:
    arrays = model.param_arrays(params)
    return AdamState(
        m=[np.zeros_like(a) for a in arrays],
        v=[np.zeros_like(a) for a in arrays],
        t=0,
    )


def _edge_layers(dtype) -> tuple[ConvLayer, ConvLayer]:
    kx = EDGE_KERNEL.astype(dtype).reshape(1, 1, 3, 3)
    ky = EDGE_KERNEL.T.astype(dtype).reshape(1, 1, 3, 3)
    zero = np.zeros(1, dtype)
    return ConvLayer(kx, zero, 1), ConvLayer(ky, zero, 1)


def sobel_gradient_sq(y: np.ndarray) -> np.ndarray:
    """|grad Y|^2 per pixel and channel: (h*Y)^2 + (h^T*Y)^2."""
    y = np.asarray(y)
    if y.ndim != 4:
        raise ShapeError(f"expected a 4-d tensor, got shape {y.shape}")
    n, c, h, w = y.shape
    lx, ly = _edge_layers(y.dtype)
    flat = y.reshape(n * c, 1, h, w)
    gx = ops.conv2d(flat, lx)
    gy = ops.conv2d(flat, ly)
    return (gx * gx + gy * gy).reshape(n, c, h, w)


def _check_pair(y_out: np.ndarray, y_hr: np.ndarray) -> None:
    if y_out.shape != y_hr.shape:
        raise ShapeError(f"output {y_out.shape} and target {y_hr.shape} shapes differ")
    if y_out.ndim != 4:
        raise ShapeError(f"expected 4-d tensors, got shape {y_out.shape}")


def loss(y_out: np.ndarray, y_hr: np.ndarray, reg_lambda: float) -> float:
    """Mean squared error plus reg_lambda times mean edge energy."""
    _check_pair(y_out, y_hr)
    acc = np.result_type(y_out.dtype, np.float64)
    diff = y_out - y_hr
    value = float(np.mean(diff * diff, dtype=acc))
    if reg_lambda:
        value += reg_lambda * float(np.mean(sobel_gradient_sq(y_out), dtype=acc))
    return value


def loss_backward(y_out: np.ndarray, y_hr: np.ndarray, reg_lambda: float) -> np.ndarray:
    """Analytic d loss / d y_out."""
    _, grad = _loss_and_grad(y_out, y_hr, reg_lambda)
    return grad


def _loss_and_grad(y_out: np.ndarray, y_hr: np.ndarray, reg_lambda: float):
    _check_pair(y_out, y_hr)
    n, c, h, w = y_out.shape
    acc = np.result_type(y_out.dtype, np.float64)
    inv = 1.0 / y_out.size
    diff = y_out - y_hr
    value = float(np.mean(diff * diff, dtype=acc))
    grad = diff
    grad *= grad.dtype.type(2.0 * inv)
    if reg_lambda:
        lx, ly = _edge_layers(y_out.dtype)
        flat = y_out.reshape(n * c, 1, h, w)
        gx = ops.conv2d(flat, lx)
        gy = ops.conv2d(flat, ly)
        value += reg_lambda * (
            float(np.mean(gx * gx, dtype=acc))
            + float(np.mean(gy * gy, dtype=acc))
        )
        coef = gx.dtype.type(2.0 * inv * reg_lambda)
        gx *= coef
        gy *= coef
        dx, _, _ = ops.conv2d_backward(gx, flat, lx)
        dy_, _, _ = ops.conv2d_backward(gy, flat, ly)
        grad += (dx + dy_).reshape(n, c, h, w)
    return value, grad


def adam_step(params: ModelParams, grads: list, state: AdamState, lr: float) -> None:
    """One ADAM update, in place on the parameter arrays."""
    arrays = model.param_arrays(params)
    if len(grads) != len(arrays):
        raise ShapeError(f"got {len(grads)} gradients for {len(arrays)} parameter arrays")
    state.t += 1
    b1c = 1.0 - ADAM_BETA1 ** state.t
    b2c = 1.0 - ADAM_BETA2 ** state.t
    for arr, g, m, v in zip(arrays, grads, state.m, state.v):
        if g.shape != arr.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {arr.shape}")
        dt = arr.dtype.type
        m *= dt(ADAM_BETA1)
        m += dt(1.0 - ADAM_BETA1) * g
        v *= dt(ADAM_BETA2)
        v += dt(1.0 - ADAM_BETA2) * (g * g)
        arr -= dt(lr) * (m / dt(b1c)) / (np.sqrt(v / dt(b2c)) + dt(ADAM_EPS))


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    params: ModelParams
    adam: AdamState
    epoch_next: int
    best_params: ModelParams
    best_val: float
    best_epoch: int


@dataclass
class TrainResult:
    params: ModelParams  # parameters with the lowest validation loss seen
    log: list  # rows (epoch, train_loss, val_loss or None, wall_seconds)
    best_epoch: int
    best_val: float
    state: TrainState = field(repr=False, default=None)


def _stack(pairs) -> tuple[np.ndarray, np.ndarray]:
    lrs, hrs = [], []
    for p in pairs:
        lr = np.asarray(p.lr if hasattr(p, "lr") else p[0], dtype=np.float32)
        hr = np.asarray(p.hr if hasattr(p, "hr") else p[1], dtype=np.float32)
        if lr.ndim != 3 or hr.ndim != 3:
            raise ShapeError("patch pairs must be (H, W, C) images")
        lrs.append(lr.transpose(2, 0, 1))
        hrs.append(hr.transpose(2, 0, 1))
    x = np.stack(lrs)
    y = np.stack(hrs)
    if len({a.shape for a in lrs}) > 1 or len({a.shape for a in hrs}) > 1:
        raise ShapeError("all patches in a set must share dimensions")
    return x, y


def _mean_loss(params: ModelParams, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> float:
    total = 0.0
    for lo in range(0, len(x), cfg.batch_size):
        xb = x[lo : lo + cfg.batch_size]
        yb = y[lo : lo + cfg.batch_size]
        total += loss(model.forward(params, xb), yb, cfg.reg_lambda) * len(xb)
    return total / len(x)


def train(
    train_pairs,
    val_pairs,
    cfg: TrainConfig,
    spec: Optional[ArchitectureSpec] = None,
    state: Optional[TrainState] = None,
    log_path=None,
) -> TrainResult:
    """Train a model, returning the best-validation parameters and a log.

    Each epoch shuffles the training pairs with a generator derived from
    (cfg.seed, epoch), partitions them into batches of cfg.batch_size
    (short remainder kept), and applies forward/backward/ADAM per batch.
    Mean validation loss (same lambda) is evaluated every
    cfg.validation_interval epochs and on the final epoch; the returned
    parameters are a copy from the epoch with the lowest validation loss.

    Pass `state` (from a previous TrainResult) to resume: the epoch
    schedule continues where it stopped and reproduces an unbroken run
    bitwise. `spec` is required when starting fresh.
    """
    if train_pairs is None or len(train_pairs) == 0:
        raise ValueError("training set is empty")
    if val_pairs is None or len(val_pairs) == 0:
        raise ValueError("validation set is empty")
    x_tr, y_tr = _stack(train_pairs)
    x_va, y_va = _stack(val_pairs)

    if state is not None:
        params = state.params
        adam = state.adam
        start_epoch = state.epoch_next
        best_params = state.best_params
        best_val = state.best_val
        best_epoch = state.best_epoch
        spec = params.spec
    else:
        if spec is None:
            raise ValueError("spec is required when no resume state is given")
        params = model.init_params(spec, _derived_seed(cfg.seed, 0))
        adam = init_adam(params)
        start_epoch = 1
        best_params = model.clone_params(params)
        best_val = float("inf")
        best_epoch = 0

    expect = model.output_dims(x_tr.shape[2], x_tr.shape[3], spec.scale)
    if y_tr.shape[2:] != expect:
        raise ShapeError(
            f"label dims {y_tr.shape[2:]} do not match {expect} expected for "
            f"{x_tr.shape[2]}x{x_tr.shape[3]} inputs at scale {spec.scale}"
        )

    n = len(x_tr)
    log_rows = []
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1, epoch)))
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            xb = x_tr[idx]
            yb = y_tr[idx]
            out, cache = model.forward_with_cache(params, xb)
            value, d_out = _loss_and_grad(out, yb, cfg.reg_lambda)
            grads, _ = model.backward(params, cache, d_out)
            adam_step(params, grads, adam, cfg.learning_rate)
            total += value * len(idx)
        train_loss = total / n

        val_loss = None
        if epoch % cfg.validation_interval == 0 or epoch == cfg.max_epochs:
            val_loss = _mean_loss(params, x_va, y_va, cfg)
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_params = model.clone_params(params)
        log_rows.append((epoch, train_loss, val_loss, time.perf_counter() - t0))

    final_state = TrainState(
        params=params,
        adam=adam,
        epoch_next=cfg.max_epochs + 1,
        best_params=best_params,
        best_val=best_val,
        best_epoch=best_epoch,
    )
    if log_path is not None:
        write_log(log_path, log_rows)
    return TrainResult(
        params=best_params,
        log=log_rows,
        best_epoch=best_epoch,
        best_val=best_val,
        state=final_state,
    )


def _derived_seed(seed: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((seed, stream))


def write_log(path, rows) -> None:
    """CSV log: epoch, train_loss, val_loss, wall_seconds (atomic write)."""
    lines = ["epoch,train_loss,val_loss,wall_seconds"]
    for epoch, train_loss, val_loss, wall in rows:
        val_txt = "" if val_loss is None else repr(float(val_loss))
        lines.append(f"{epoch},{repr(float(train_loss))},{val_txt},{wall:.3f}")
    data = ("\n".join(lines) + "\n").encode()
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Optimizer/run state serialization (for stop-and-resume). The model
# checkpoint format stays minimal, so the full training state goes to a
# separate npz archive.


def save_train_state(path, state: TrainState, cfg: TrainConfig) -> None:
    spec = state.params.spec
    payload = {
        "spec": np.array(
            [spec.a0, spec.k, spec.alpha, spec.r, spec.down_stride, spec.color_channels],
            dtype=np.int64,
        ),
        "counters": np.array([state.adam.t, state.epoch_next, state.best_epoch], np.int64),
        "best_val": np.array([state.best_val], np.float64),
        "cfg": np.array(
            [cfg.learning_rate, cfg.reg_lambda, cfg.batch_size, cfg.max_epochs, cfg.seed,
             cfg.validation_interval],
            dtype=np.float64,
        ),
    }
    for i, a in enumerate(model.param_arrays(state.params)):
        payload[f"p{i}"] = a
    for i, a in enumerate(model.param_arrays(state.best_params)):
        payload[f"b{i}"] = a
    for i, a in enumerate(state.adam.m):
        payload[f"m{i}"] = a
    for i, a in enumerate(state.adam.v):
        payload[f"v{i}"] = a
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_train_state(path) -> TrainState:
    with np.load(path) as z:
        a0, k, alpha, r, down_stride, cc = (int(v) for v in z["spec"])
        spec = ArchitectureSpec(a0, k, alpha, r, down_stride, cc)
        t, epoch_next, best_epoch = (int(v) for v in z["counters"])
        best_val = float(z["best_val"][0])
        params = _params_from_arrays(spec, z, "p")
        best_params = _params_from_arrays(spec, z, "b")
        n_arrays = len(model.param_arrays(params))
        adam = AdamState(
            m=[z[f"m{i}"] for i in range(n_arrays)],
            v=[z[f"v{i}"] for i in range(n_arrays)],
            t=t,
        )
    return TrainState(
        params=params,
        adam=adam,
        epoch_next=epoch_next,
        best_params=best_params,
        best_val=best_val,
        best_epoch=best_epoch,
    )


def _params_from_arrays(spec: ArchitectureSpec, z, prefix: str) -> ModelParams:
    plan = model._layer_plan(spec)
    layer_list = []
    for i, (co, ci, stride) in enumerate(plan):
        kern = np.array(z[f"{prefix}{2 * i}"])
        bias = np.array(z[f"{prefix}{2 * i + 1}"])
        layer_list.append(ConvLayer(kern, bias, stride))
    return model._assemble(spec, layer_list)
