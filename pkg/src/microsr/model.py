"""Network assembly, initialization, inference, and checkpoints.

The model maps an (N, 3, P, Q) image tensor to (N, 3, ceil(2.5 P),
ceil(2.5 Q)): an input convolution with ReLU, K residual blocks whose
channel counts widen on a fixed integer schedule, a convolution
expanding to 3*r^2 channels, a pixel shuffle trading those channels
for an r-times finer grid, and a stride-2 convolution that brings the
net scale factor to r/2. Every convolution is 3x3 with one-pixel zero
padding, so the spatial dimensions follow a pure ceiling rule that can
be computed without running the network (`output_dims`).
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import ops
from .errors import CheckpointError, ShapeError
from .ops import ConvLayer

CHECKPOINT_MAGIC = b"DLSR"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchitectureSpec:
    """Hyperparameters that fix the network shape.

    a0: channels out of the input layer; k: residual block count;
    alpha: total channel growth across the pyramid; r: pixel-shuffle
    factor; down_stride: stride of the final convolution. The scale
    factor is r / down_stride (5/2 by default).
    """

    a0: int = 32
    k: int = 5
    alpha: int = 10
    r: int = 5
    down_stride: int = 2
    color_channels: int = 3

    def __post_init__(self):
        if self.color_channels < 1:
            raise ValueError(f"color_channels must be >= 1, got {self.color_channels}")
        if self.a0 < self.color_channels:
            raise ValueError(f"a0 ({self.a0}) must be >= color_channels ({self.color_channels})")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")
        if self.down_stride not in (1, 2):
            raise ValueError(f"down_stride must be 1 or 2, got {self.down_stride}")

    @property
    def scale(self) -> Fraction:
        return Fraction(self.r, self.down_stride)

    @property
    def schedule(self) -> list[int]:
        return channel_schedule(self.a0, self.alpha, self.k)


def channel_schedule(a0: int, alpha: int, k: int) -> list[int]:
    """Channel count after each block: A_j = A_{j-1} + floor(alpha*j/k + 1/2).

    Evaluated in exact integer arithmetic: floor(alpha*j/k + 1/2) =
    (2*alpha*j + k) // (2*k).
    """
    if a0 < 1 or k < 1 or alpha < 0:
        raise ValueError(f"invalid schedule arguments a0={a0}, alpha={alpha}, k={k}")
    out = []
    a = a0
    for j in range(1, k + 1):
        a += (2 * alpha * j + k) // (2 * k)
        out.append(a)
    return out


@dataclass
class ModelParams:
    """All learnable parameters, plus the architecture spec that shaped them.

    Layer order everywhere (iteration, checkpoints, optimizer state):
    input_layer, block1.conv1, block1.conv2, ..., blockK.conv2,
    head_expand, head_down.
    """

    spec: ArchitectureSpec
    input_layer: ConvLayer
    blocks: list = field(default_factory=list)
    head_expand: ConvLayer = None
    head_down: ConvLayer = None


def layers(params: ModelParams) -> list[ConvLayer]:
    """Convolution layers in the canonical order (2K+3 of them)."""
    out = [params.input_layer]
    for c1, c2 in params.blocks:
        out.append(c1)
        out.append(c2)
    out.append(params.head_expand)
    out.append(params.head_down)
    return out


def param_arrays(params: ModelParams) -> list[np.ndarray]:
    """Flat list of parameter arrays: kernels, bias per layer in order."""
    out = []
    for layer in layers(params):
        out.append(layer.kernels)
        out.append(layer.bias)
    return out


def clone_params(params: ModelParams) -> ModelParams:
    new_layers = [
        ConvLayer(l.kernels.copy(), l.bias.copy(), l.stride) for l in layers(params)
    ]
    return _assemble(params.spec, new_layers)


def _layer_plan(spec: ArchitectureSpec) -> list[tuple[int, int, int]]:
    """(c_out, c_in, stride) for each layer in canonical order."""
    plan = [(spec.a0, spec.color_channels, 1)]
    prev = spec.a0
    for a in spec.schedule:
        plan.append((a, prev, 1))
        plan.append((a, a, 1))
        prev = a
    plan.append((spec.color_channels * spec.r * spec.r, prev, 1))
    plan.append((spec.color_channels, spec.color_channels, spec.down_stride))
    return plan


def _assemble(spec: ArchitectureSpec, layer_list: list[ConvLayer]) -> ModelParams:
    plan = _layer_plan(spec)
    if len(layer_list) != len(plan):
        raise ShapeError(f"expected {len(plan)} layers, got {len(layer_list)}")
    for layer, (co, ci, s) in zip(layer_list, plan):
        if (layer.c_out, layer.c_in, layer.stride) != (co, ci, s):
            raise ShapeError(
                f"layer ({layer.c_out}, {layer.c_in}, stride {layer.stride}) does not "
                f"match expected ({co}, {ci}, stride {s})"
            )
    k = spec.k
    blocks = [(layer_list[1 + 2 * j], layer_list[2 + 2 * j]) for j in range(k)]
    return ModelParams(
        spec=spec,
        input_layer=layer_list[0],
        blocks=blocks,
        head_expand=layer_list[2 * k + 1],
        head_down=layer_list[2 * k + 2],
    )


def truncated_normal(rng: np.random.Generator, shape, sigma: float, cutoff: float = 2.0):
    """Zero-mean normal draws, resampling anything beyond cutoff*sigma."""
    x = rng.standard_normal(shape) * sigma
    bound = cutoff * sigma
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum())) * sigma
        bad = np.abs(x) > bound
    return x


def init_params(spec: ArchitectureSpec, seed: int, dtype=np.float32) -> ModelParams:
    """Fresh parameters: kernels ~ truncated normal (sigma 0.05, cut at
    +-2 sigma), biases exactly zero. Deterministic in the seed."""
    rng = np.random.default_rng(seed)
    layer_list = []
    for co, ci, stride in _layer_plan(spec):
        kern = truncated_normal(rng, (co, ci, 3, 3), 0.05).astype(dtype)
        bias = np.zeros(co, dtype)
        layer_list.append(ConvLayer(kern, bias, stride))
    return _assemble(spec, layer_list)


def residual_block(x: np.ndarray, block: tuple[ConvLayer, ConvLayer]) -> np.ndarray:
    """zero_channel_pad(x, C_out) + ReLU(conv2(ReLU(conv1(x)))).

    The shortcut widens by appending zero channels, so C_in <= C_out.
    """
    c1, c2 = block
    if c1.c_in < 1 or c2.c_out < c1.c_in:
        raise ShapeError(
            f"residual block must not shrink channels: {c1.c_in} -> {c2.c_out}"
        )
    h = ops.relu(ops.conv2d(x, c1))
    h = ops.relu(ops.conv2d(h, c2))
    return ops.zero_channel_pad(x, c2.c_out) + h


def _run(params: ModelParams, x: np.ndarray, keep: bool):
    spec = params.spec
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != spec.color_channels:
        raise ShapeError(
            f"forward expects (N, {spec.color_channels}, P, Q), got {x.shape}"
        )
    cache = {"x": x} if keep else None

    a = ops.relu(ops.conv2d(x, params.input_layer))
    if keep:
        cache["input_act"] = a

    block_caches = []
    cur = a
    for c1, c2 in params.blocks:
        h1 = ops.relu(ops.conv2d(cur, c1))
        h2 = ops.relu(ops.conv2d(h1, c2))
        nxt = ops.zero_channel_pad(cur, c2.c_out) + h2
        if keep:
            block_caches.append((cur, h1, h2))
        cur = nxt
    if keep:
        cache["blocks"] = block_caches
        cache["trunk_out"] = cur

    e = ops.conv2d(cur, params.head_expand)
    sh = ops.pixel_shuffle(e, spec.r)
    if keep:
        cache["shuffled"] = sh
    y = ops.conv2d(sh, params.head_down)
    return y, cache


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Run the network. Output spatial dims follow `output_dims`."""
    y, _ = _run(params, x, keep=False)
    return y


def forward_with_cache(params: ModelParams, x: np.ndarray):
    """Forward pass that also returns the intermediates backward needs."""
    return _run(params, x, keep=True)


def backward(params: ModelParams, cache: dict, dy: np.ndarray):
    """Backpropagate dy (gradient at the output) through the network.

    Returns (grads, dx): grads is a flat list matching `param_arrays`
    order, dx the gradient at the network input.
    """
    spec = params.spec

    d_sh, dk_down, db_down = ops.conv2d_backward(dy, cache["shuffled"], params.head_down)
    d_e = ops.pixel_shuffle_backward(d_sh, spec.r)
    d_cur, dk_exp, db_exp = ops.conv2d_backward(d_e, cache["trunk_out"], params.head_expand)

    block_grads = []
    for (c1, c2), (inp, h1, h2) in zip(
        reversed(params.blocks), reversed(cache["blocks"])
    ):
        d_h2 = ops.relu_backward(d_cur, h2)
        d_h1, dk2, db2 = ops.conv2d_backward(d_h2, h1, c2)
        d_h1 = ops.relu_backward(d_h1, h1)
        d_inp, dk1, db1 = ops.conv2d_backward(d_h1, inp, c1)
        d_inp += ops.zero_channel_pad_backward(d_cur, inp.shape[1])
        block_grads.append((dk1, db1, dk2, db2))
        d_cur = d_inp

    d_a = ops.relu_backward(d_cur, cache["input_act"])
    dx, dk_in, db_in = ops.conv2d_backward(d_a, cache["x"], params.input_layer)

    grads = [dk_in, db_in]
    for dk1, db1, dk2, db2 in reversed(block_grads):
        grads.extend([dk1, db1, dk2, db2])
    grads.extend([dk_exp, db_exp, dk_down, db_down])
    return grads, dx


def output_dims(p: int, q: int, scale: Fraction) -> tuple[int, int]:
    """(ceil(p * scale), ceil(q * scale)) in exact rational arithmetic."""
    if p < 1 or q < 1:
        raise ValueError(f"input dims must be >= 1, got {p}x{q}")
    scale = Fraction(scale)
    return math.ceil(p * scale), math.ceil(q * scale)


def self_feed(params: ModelParams, img: np.ndarray, cycles: int) -> np.ndarray:
    """Apply the network to its own output `cycles` times.

    img is (H, W, 3) with values in [0, 1]. Outputs are clamped back to
    [0, 1] between cycles, since each re-enters the image pipeline; the
    final output is returned as produced (cycles=1 is exactly `forward`).
    """
    if cycles < 1:
        raise ValueError(f"cycles must be >= 1, got {cycles}")
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != params.spec.color_channels:
        raise ShapeError(f"expected (H, W, {params.spec.color_channels}), got {img.shape}")
    cur = img
    for cycle in range(cycles):
        x = cur.transpose(2, 0, 1)[None]
        y = forward(params, x)[0].transpose(1, 2, 0)
        cur = y if cycle == cycles - 1 else np.clip(y, 0.0, 1.0)
    return cur


# ---------------------------------------------------------------------------
# Checkpoint serialization.
#
# Binary layout (all little-endian):
#   magic "DLSR", version u16,
#   a0, k, alpha, r, down_stride, color_channels as u32,
#   then per layer in canonical order:
#     c_out, c_in, stride as u32,
#     kernel values as f32 in row-major (c_out, c_in, 3, 3) order,
#     bias values as f32.


def save_checkpoint(params: ModelParams, path) -> None:
    """Write params to path (atomically; no partial file on error)."""
    spec = params.spec
    blob = bytearray()
    blob += struct.pack("<4sH", CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    blob += struct.pack(
        "<6I", spec.a0, spec.k, spec.alpha, spec.r, spec.down_stride, spec.color_channels
    )
    for layer in layers(params):
        blob += struct.pack("<3I", layer.c_out, layer.c_in, layer.stride)
        blob += np.ascontiguousarray(layer.kernels, dtype="<f4").tobytes()
        blob += np.ascontiguousarray(layer.bias, dtype="<f4").tobytes()
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> ModelParams:
    """Read a checkpoint; round-trips with save_checkpoint bitwise."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"checkpoint {path} is truncated at byte {off}")
        piece = blob[off : off + n]
        off += n
        return piece

    magic, version = struct.unpack("<4sH", take(6))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a model checkpoint (bad magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has unsupported version {version}")
    a0, k, alpha, r, down_stride, color_channels = struct.unpack("<6I", take(24))
    try:
        spec = ArchitectureSpec(a0, k, alpha, r, down_stride, color_channels)
    except ValueError as exc:
        raise CheckpointError(f"{path} holds an invalid spec: {exc}") from exc

    layer_list = []
    for exp_co, exp_ci, exp_s in _layer_plan(spec):
        co, ci, stride = struct.unpack("<3I", take(12))
        if (co, ci, stride) != (exp_co, exp_ci, exp_s):
            raise CheckpointError(
                f"{path}: layer {len(layer_list)} is ({co}, {ci}, stride {stride}), "
                f"expected ({exp_co}, {exp_ci}, stride {exp_s})"
            )
        kern = np.frombuffer(take(co * ci * 9 * 4), dtype="<f4").reshape(co, ci, 3, 3)
        bias = np.frombuffer(take(co * 4), dtype="<f4")
        layer_list.append(ConvLayer(kern.copy(), bias.copy(), stride))
    if off != len(blob):
        raise CheckpointError(f"{path} has {len(blob) - off} trailing bytes")
    return _assemble(spec, layer_list)
