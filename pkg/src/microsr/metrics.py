"""Image quality metrics: SSIM and bar-target resolution curves.

SSIM follows the standard formulation: 11x11 Gaussian window with
sigma 1.5, C1 = 0.01^2 and C2 = 0.03^2 for a unit dynamic range, local
statistics over valid (fully inside) windows only, mean over the map.
Color images score as the mean over channels.

Resolution is probed with three-bar targets: groups of three dark bars
on a white field, one element per spatial period. Element contrast is
the Michelson contrast of the matched bar/gap extrema of the averaged
cross-section; a curve over several periods gives contrast versus
spatial frequency (cycles/mm under a physical pixel pitch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import gaussian_blur, to_grayscale
from .errors import DimensionError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

DEFAULT_PITCH_UM = 0.07


def _ssim_kernel() -> np.ndarray:
    d = np.arange(SSIM_WINDOW, dtype=np.float64) - (SSIM_WINDOW - 1) / 2.0
    k = np.exp(-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return k / k.sum()


def _window_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = img
    for axis in (0, 1):
        win = sliding_window_view(out, SSIM_WINDOW, axis=axis)
        out = win @ kernel
    return out


def _ssim_single(a: np.ndarray, b: np.ndarray) -> float:
    k = _ssim_kernel()
    mu_a = _window_mean(a, k)
    mu_b = _window_mean(b, k)
    var_a = _window_mean(a * a, k) - mu_a * mu_a
    var_b = _window_mean(b * b, k) - mu_b * mu_b
    cov = _window_mean(a * b, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity between two images in [0, 1].

    Color inputs score as the mean of the per-channel values.
    Identical inputs score exactly 1.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise ShapeError(f"expected (H, W) or (H, W, C), got {a.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise DimensionError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}"
        )
    if a.ndim == 2:
        return _ssim_single(a, b)
    vals = [_ssim_single(a[..., c], b[..., c]) for c in range(a.shape[2])]
    return float(np.mean(vals))


def evaluate_testset(params, pairs: Sequence, batch_size: int = 8):
    """SSIM of network outputs and of bicubic-upscaled inputs vs labels.

    Returns (rows, mean_net, mean_bicubic) where each row is
    (source_id, ssim_network, ssim_bicubic). Outputs and the bicubic
    baseline are clamped to [0, 1] before scoring.
    """
    from .data import bicubic_resize
    from .model import forward

    if len(pairs) == 0:
        raise ValueError("no pairs to evaluate")
    rows = []
    scale = params.spec.scale
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        x = np.stack([np.asarray(p.lr, dtype=np.float32) for p in chunk])
        x = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
        y = forward(params, x).transpose(0, 2, 3, 1)
        for p, out in zip(chunk, y):
            hr = np.asarray(p.hr, dtype=np.float64)
            net = np.clip(out.astype(np.float64), 0.0, 1.0)
            base = np.clip(bicubic_resize(p.lr, scale), 0.0, 1.0)
            rows.append((p.source_id, ssim(net, hr), ssim(base, hr)))
    mean_net = float(np.mean([r[1] for r in rows]))
    mean_bicubic = float(np.mean([r[2] for r in rows]))
    return rows, mean_net, mean_bicubic


# ---------------------------------------------------------------------------
# Three-bar resolution targets.


@dataclass
class BarElement:
    """One three-bar group: bars run vertically, dark on white.

    Bar k covers columns [x0 + k*period, x0 + k*period + period/2) for
    k in 0..2, rows [y0, y0 + length). Rendered pixels are point
    samples at integer coordinates; geometry may be fractional (e.g.
    after rescaling to another grid).
    """

    x0: float
    y0: float
    period: float
    length: float


@dataclass
class BarTargetSpec:
    """Layout of a synthetic bar target.

    One element per period, laid out left to right with at least
    max(margin, period) background columns between elements so each
    analysis window stays clear of its neighbors. Bars are dark (0) on
    a white (1) field; pitch_um is the physical size of one pixel.
    """

    periods: Sequence[float]
    pitch_um: float = DEFAULT_PITCH_UM
    line_length_factor: float = 2.5
    margin: int = 8

    def __post_init__(self):
        self.periods = [float(p) for p in self.periods]
        if not self.periods:
            raise ValueError("need at least one period")
        if any(p < 2.0 for p in self.periods):
            raise ValueError(f"periods below 2 px are not representable: {self.periods}")
        if self.pitch_um <= 0:
            raise ValueError(f"pixel pitch must be positive, got {self.pitch_um}")


@dataclass
class MtfCurve:
    """Contrast per element, sorted by frequency (cycles/mm) ascending."""

    period_cycles_per_mm: np.ndarray
    contrast: np.ndarray

    def to_csv(self, path) -> None:
        lines = ["period_cycles_per_mm,contrast"]
        for f, c in zip(self.period_cycles_per_mm, self.contrast):
            lines.append(f"{repr(float(f))},{repr(float(c))}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def gen_bar_target(spec: BarTargetSpec, blur_sigma: float = 0.0):
    """Render the bar target, optionally blurred by a Gaussian PSF.

    Returns (image, elements). With blur_sigma 0 pixel values are
    exactly 0 or 1.
    """
    elements = []
    x = spec.margin
    max_len = 0
    for p in spec.periods:
        x += int(math.ceil(max(spec.margin, p)))
        length = int(math.ceil(spec.line_length_factor * p))
        elements.append(BarElement(x0=x, y0=spec.margin, period=p, length=length))
        x += int(math.ceil(2.5 * p))
        max_len = max(max_len, length)
    width = x + int(math.ceil(max(spec.margin, spec.periods[-1]))) + spec.margin
    height = 2 * spec.margin + max_len
    img = np.ones((height, width))
    for el in elements:
        x0 = int(el.x0)
        cols = np.arange(x0, min(int(math.ceil(x0 + 2.5 * el.period)), width))
        rel = (cols - x0).astype(np.float64)
        k = np.floor(rel / el.period)
        dark = (k <= 2) & (rel - k * el.period < el.period / 2.0)
        img[int(el.y0) : int(el.y0 + el.length), cols[dark]] = 0.0
    if blur_sigma > 0:
        img = gaussian_blur(img, blur_sigma)
    return img, elements


def rescale_elements(elements: Sequence[BarElement], factor) -> list[BarElement]:
    """Element geometry on a grid resampled by factor (center-aligned).

    Pixel centers map as x' = (x + 0.5) * factor - 0.5, matching the
    resampling convention used throughout; periods and lengths scale
    linearly.
    """
    f = float(Fraction(repr(factor)) if isinstance(factor, float) else Fraction(factor))
    return [
        BarElement(
            x0=(el.x0 + 0.5) * f - 0.5,
            y0=(el.y0 + 0.5) * f - 0.5,
            period=el.period * f,
            length=el.length * f,
        )
        for el in elements
    ]


def _run_length(values: np.ndarray):
    """(value, start, end) runs of equal consecutive values."""
    runs = []
    start = 0
    for i in range(1, len(values) + 1):
        if i == len(values) or values[i] != values[start]:
            runs.append((values[start], start, i))
            start = i
    return runs


def element_contrast(img: np.ndarray, element: BarElement) -> float:
    """Michelson contrast of one bar element, 0.0 if unresolved.

    The cross-section is the column-wise mean over the central 85% of
    the line length, extended period/4 beyond the bars on both sides so
    the outer bars are interior extrema. Local extrema of the
    run-length-compressed profile are matched to the three expected bar
    centers and two gap centers; any expectation without an extremum
    within period/8 means the bars are not resolved and contrast is 0.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = to_grayscale(img)
    p = element.period
    if (
        element.x0 < 0
        or element.y0 < 0
        or element.x0 + 2.5 * p > img.shape[1]
        or element.y0 + element.length > img.shape[0]
    ):
        raise DimensionError(f"element geometry {element} extends outside {img.shape}")
    r0 = int(round(element.y0 + 0.075 * element.length))
    r1 = int(round(element.y0 + 0.925 * element.length))
    if r1 <= r0:
        r0 = int(round(element.y0))
        r1 = int(round(element.y0 + element.length))
    c0 = max(int(math.floor(element.x0 - 0.25 * p)), 0)
    c1 = min(int(math.ceil(element.x0 + 2.75 * p)), img.shape[1])
    profile = img[r0:r1, c0:c1].mean(axis=0)

    runs = _run_length(profile)
    minima, maxima = [], []
    for i in range(1, len(runs) - 1):
        v, s, e = runs[i]
        center = c0 + (s + e - 1) / 2.0
        if v < runs[i - 1][0] and v < runs[i + 1][0]:
            minima.append((center, v))
        elif v > runs[i - 1][0] and v > runs[i + 1][0]:
            maxima.append((center, v))

    def match(expected: float, found: list):
        best = None
        for center, v in found:
            d = abs(center - expected)
            if d <= p / 8.0 and (best is None or d < best[0]):
                best = (d, v)
        return None if best is None else best[1]

    lows, highs = [], []
    for k in range(3):
        v = match(element.x0 + p / 4.0 + k * p, minima)
        if v is None:
            return 0.0
        lows.append(v)
    for k in range(2):
        v = match(element.x0 + 3.0 * p / 4.0 + k * p, maxima)
        if v is None:
            return 0.0
        highs.append(v)
    i_max = max(highs)
    i_min = min(lows)
    if i_max + i_min <= 0:
        return 0.0
    return (i_max - i_min) / (i_max + i_min)


def mtf_curve(
    img: np.ndarray,
    elements: Sequence[BarElement],
    pitch_um: float = DEFAULT_PITCH_UM,
) -> MtfCurve:
    """Contrast of each element against its spatial frequency.

    Frequency of a bar element with period p pixels at a pitch of
    pitch_um micrometers per pixel is 1000 / (p * pitch_um) cycles/mm.
    The curve is sorted by increasing frequency.
    """
    if pitch_um <= 0:
        raise ValueError(f"pixel pitch must be positive, got {pitch_um}")
    freqs = np.array([1000.0 / (el.period * pitch_um) for el in elements])
    contrasts = np.array([element_contrast(img, el) for el in elements])
    order = np.argsort(freqs)
    return MtfCurve(period_cycles_per_mm=freqs[order], contrast=contrasts[order])
