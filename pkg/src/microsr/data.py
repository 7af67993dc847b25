"""Data engineering for training pairs.

Covers grayscale conversion, separable bicubic resampling (cubic
kernel a = -0.5, center-aligned source coordinates, clamped edges),
normalized cross-correlation template matching, feather-blended mosaic
stitching, similarity-transform refinement between an input patch and
its higher-resolution label, patch extraction/batching, and a
synthetic degradation generator (Gaussian PSF then 2/5-area
downsampling) used to build desk-scale datasets.

Images here are float arrays in [0, 1]: (H, W) grayscale or (H, W, 3)
color. Operations compute in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AlignmentError, DimensionError, RegistrationError, ShapeError, StitchError

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

# NCC peaks closer than this are treated as exact ties and resolved in
# favor of the lexicographically smallest (row, col) offset.
_TIE_EPS = 1e-9


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Luma 0.299 R + 0.587 G + 0.114 B. Grayscale input passes through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img.copy()
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) or (H, W), got {img.shape}")
    return img @ GRAY_WEIGHTS


def _as_fraction(factor) -> Fraction:
    if isinstance(factor, float):
        # repr round-trips the decimal the caller typed (0.4 -> 2/5)
        return Fraction(repr(factor))
    return Fraction(factor)


def _cubic_weights(t: np.ndarray) -> np.ndarray:
    """Weights of the 4 taps at offsets -1..2 for fractional position t.

    Cubic convolution kernel with a = -0.5:
      |d| <= 1: 1.5|d|^3 - 2.5|d|^2 + 1
      1 < |d| < 2: -0.5(|d|^3 - 5|d|^2 + 8|d| - 4)
    """

    def near(d):
        return (1.5 * d - 2.5) * d * d + 1.0

    def far(d):
        return -0.5 * (((d - 5.0) * d + 8.0) * d - 4.0)

    w = np.empty(t.shape + (4,))
    w[..., 0] = far(1.0 + t)
    w[..., 1] = near(t)
    w[..., 2] = near(1.0 - t)
    w[..., 3] = far(2.0 - t)
    return w


def _resample_axis(arr: np.ndarray, axis: int, out_len: int, factor: Fraction, wrap: bool):
    n = arr.shape[axis]
    inv = factor.denominator / factor.numerator
    s = (np.arange(out_len) + 0.5) * inv - 0.5
    base = np.floor(s).astype(np.int64)
    t = s - base
    idx = base[:, None] + np.arange(-1, 3)
    idx = idx % n if wrap else np.clip(idx, 0, n - 1)
    w = _cubic_weights(t)
    moved = np.moveaxis(np.asarray(arr, dtype=np.float64), axis, 0)
    gathered = moved[idx]  # (out_len, 4, ...)
    out = np.einsum("ot,ot...->o...", w, gathered)
    return np.moveaxis(out, 0, axis)


def bicubic_resize(img: np.ndarray, factor, wrap: bool = False) -> np.ndarray:
    """Separable cubic resampling; output dims are ceil(dims * factor).

    Source coordinates are center-aligned: src = (dst + 0.5) / factor - 0.5.
    Edges clamp by default (wrap is used internally by the synthetic
    degradation so averaging conserves the mean exactly).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ShapeError(f"expected (H, W) or (H, W, C), got {img.shape}")
    f = _as_fraction(factor)
    if f <= 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    out_h = math.ceil(img.shape[0] * f)
    out_w = math.ceil(img.shape[1] * f)
    out = _resample_axis(img, 0, out_h, f, wrap)
    out = _resample_axis(out, 1, out_w, f, wrap)
    return out


def bicubic_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, wrap: bool = False):
    """Cubic interpolation of img at fractional (ys, xs) coordinates.

    ys/xs share a shape; the result has that shape (plus channels for
    color input). Out-of-range coordinates clamp to the border.
    """
    img = np.asarray(img, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    if ys.shape != xs.shape:
        raise ShapeError(f"coordinate shapes differ: {ys.shape} vs {xs.shape}")
    h, w = img.shape[0], img.shape[1]
    by = np.floor(ys).astype(np.int64)
    bx = np.floor(xs).astype(np.int64)
    wy = _cubic_weights(ys - by)
    wx = _cubic_weights(xs - bx)
    iy = by[..., None] + np.arange(-1, 3)
    ix = bx[..., None] + np.arange(-1, 3)
    iy = iy % h if wrap else np.clip(iy, 0, h - 1)
    ix = ix % w if wrap else np.clip(ix, 0, w - 1)
    patch = img[iy[..., :, None], ix[..., None, :]]  # (..., 4, 4[, C])
    ww = wy[..., :, None] * wx[..., None, :]
    if img.ndim == 3:
        return np.einsum("...ij,...ijc->...c", ww, patch)
    return np.einsum("...ij,...ij->...", ww, patch)


def gaussian_blur(img: np.ndarray, sigma: float, wrap: bool = False) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at 3 sigma, normalized to 1."""
    img = np.asarray(img, dtype=np.float64)
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    radius = int(math.ceil(3.0 * sigma))
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(d * d) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    mode = "wrap" if wrap else "edge"
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode=mode)
        # the windowed axis keeps its position; taps land on a new last axis
        win = sliding_window_view(padded, 2 * radius + 1, axis=axis)
        out = win @ kernel
    return out


def _integral(img: np.ndarray) -> np.ndarray:
    s = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    s[1:, 1:] = img.cumsum(0).cumsum(1)
    return s


def _window_sums(s: np.ndarray, th: int, tw: int) -> np.ndarray:
    return s[th:, tw:] - s[:-th, tw:] - s[th:, :-tw] + s[:-th, :-tw]


def ncc_template_match(haystack: np.ndarray, template: np.ndarray):
    """Best integer offset of template in haystack by normalized
    cross-correlation (zero-mean, unit-variance windows).

    Returns ((row, col), peak). Ties go to the smallest (row, col) in
    lexicographic order. A constant template has no defined correlation
    and raises RegistrationError; constant haystack windows are skipped.
    """
    h = np.asarray(haystack, dtype=np.float64)
    t = np.asarray(template, dtype=np.float64)
    if h.ndim != 2 or t.ndim != 2:
        raise ShapeError("template matching expects grayscale 2-d images")
    th, tw = t.shape
    if th > h.shape[0] or tw > h.shape[1]:
        raise DimensionError(f"template {t.shape} larger than haystack {h.shape}")
    t0 = t - t.mean()
    t_norm = math.sqrt(float((t0 * t0).sum()))
    if t_norm < 1e-12 * t.size:
        raise RegistrationError("template has zero variance; correlation undefined")

    # cross-correlation of haystack with the zero-mean template via FFT
    fh = np.fft.rfft2(h)
    ft = np.fft.rfft2(t0, s=h.shape)
    corr = np.fft.irfft2(fh * np.conj(ft), s=h.shape)
    corr = corr[: h.shape[0] - th + 1, : h.shape[1] - tw + 1]

    win_sum = _window_sums(_integral(h), th, tw)
    win_ssq = _window_sums(_integral(h * h), th, tw)
    var_term = win_ssq - win_sum * win_sum / (th * tw)
    # cancellation floor: treat windows this flat as constant
    valid = var_term > 1e-13 * np.maximum(win_ssq, 1e-30)
    scores = np.full(corr.shape, -2.0)
    np.divide(corr, np.sqrt(np.maximum(var_term, 1e-300)) * t_norm, out=scores, where=valid)

    best = scores.max()
    tied = scores >= best - _TIE_EPS
    flat_index = int(np.argmax(tied))
    row, col = np.unravel_index(flat_index, scores.shape)
    return (int(row), int(col)), float(scores[row, col])


def _ncc_global(a: np.ndarray, b: np.ndarray) -> float:
    a0 = a - a.mean()
    b0 = b - b.mean()
    denom = math.sqrt(float((a0 * a0).sum()) * float((b0 * b0).sum()))
    if denom < 1e-300:
        return 0.0
    return float((a0 * b0).sum() / denom)


def stitch_mosaic(
    tiles: Sequence[tuple],
    min_overlap: int = 16,
    search_margin: int = 8,
    feather: int = 16,
):
    """Composite overlapping tiles into one image.

    tiles: sequence of (image, (approx_row, approx_col)) with top-left
    canvas positions. Every neighboring overlap (>= min_overlap pixels in
    both directions at the nominal positions) is refined by template
    matching; a correlation peak below 0.5 raises StitchError naming the
    pair. Overlaps are blended with linear feather weights.

    Returns (mosaic, positions): the composite image and the refined
    integer top-left position of every tile.
    """
    if len(tiles) == 0:
        raise ValueError("no tiles to stitch")
    imgs = [np.asarray(img, dtype=np.float64) for img, _ in tiles]
    nominal = [(int(round(r)), int(round(c))) for _, (r, c) in tiles]
    if len({im.ndim for im in imgs}) > 1:
        raise ShapeError("tiles must be all grayscale or all color")
    grays = [to_grayscale(im) if im.ndim == 3 else im for im in imgs]

    n = len(imgs)
    adj: dict[int, list[tuple[int, tuple[int, int]]]] = {i: [] for i in range(n)}
    for i in range(n):
        for j in range(i + 1, n):
            delta = _refine_pair_offset(
                grays[i], grays[j], nominal[i], nominal[j],
                min_overlap, search_margin, i, j,
            )
            if delta is None:
                continue
            adj[i].append((j, delta))
            adj[j].append((i, (-delta[0], -delta[1])))

    positions: dict[int, tuple[int, int]] = {}
    for start in range(n):
        if start in positions:
            continue
        positions[start] = nominal[start]
        queue = [start]
        while queue:
            i = queue.pop(0)
            for j, delta in adj[i]:
                if j not in positions:
                    positions[j] = (positions[i][0] + delta[0], positions[i][1] + delta[1])
                    queue.append(j)

    origin_r = min(p[0] for p in positions.values())
    origin_c = min(p[1] for p in positions.values())
    pos_list = [(positions[i][0] - origin_r, positions[i][1] - origin_c) for i in range(n)]
    canvas_h = max(pos_list[i][0] + imgs[i].shape[0] for i in range(n))
    canvas_w = max(pos_list[i][1] + imgs[i].shape[1] for i in range(n))

    extra = imgs[0].shape[2:]
    accum = np.zeros((canvas_h, canvas_w) + extra)
    wsum = np.zeros((canvas_h, canvas_w))
    for i in range(n):
        th, tw = imgs[i].shape[0], imgs[i].shape[1]
        r, c = pos_list[i]
        w = np.outer(_feather_ramp(th, feather), _feather_ramp(tw, feather))
        wexp = w[..., None] if extra else w
        accum[r : r + th, c : c + tw] += wexp * imgs[i]
        wsum[r : r + th, c : c + tw] += w
    wexp = wsum[..., None] if extra else wsum
    mosaic = np.divide(accum, wexp, out=np.zeros_like(accum), where=wexp > 0)
    return mosaic, pos_list


def _feather_ramp(n: int, feather: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    return np.minimum(np.minimum(i + 1.0, n - i), feather) / feather


def _refine_pair_offset(gi, gj, pos_i, pos_j, min_overlap, search_margin, i, j):
    """Refined (pos_j - pos_i) from matching an overlap strip, or None if
    the tiles do not overlap enough to try."""
    top = max(pos_i[0], pos_j[0])
    left = max(pos_i[1], pos_j[1])
    bottom = min(pos_i[0] + gi.shape[0], pos_j[0] + gj.shape[0])
    right = min(pos_i[1] + gi.shape[1], pos_j[1] + gj.shape[1])
    if bottom - top < min_overlap or right - left < min_overlap:
        return None

    # template: overlap region in tile j, inset so jitter keeps it inside i
    inset = min(4, (bottom - top - 8) // 2, (right - left - 8) // 2)
    inset = max(inset, 0)
    tj_r = top - pos_j[0] + inset
    tj_c = left - pos_j[1] + inset
    template = gj[tj_r : bottom - pos_j[0] - inset, tj_c : right - pos_j[1] - inset]

    sr0 = max(top - pos_i[0] - search_margin, 0)
    sc0 = max(left - pos_i[1] - search_margin, 0)
    sr1 = min(bottom - pos_i[0] + search_margin, gi.shape[0])
    sc1 = min(right - pos_i[1] + search_margin, gi.shape[1])
    search = gi[sr0:sr1, sc0:sc1]
    try:
        (mr, mc), peak = ncc_template_match(search, template)
    except RegistrationError as exc:
        raise StitchError(f"overlap between tile {i} and tile {j}: {exc}") from exc
    if peak < 0.5:
        raise StitchError(
            f"overlap between tile {i} and tile {j} has correlation peak "
            f"{peak:.3f} < 0.5"
        )
    # content at (sr0+mr, sc0+mc) in tile i == (tj_r, tj_c) in tile j
    return (sr0 + mr - tj_r, sc0 + mc - tj_c)


@dataclass
class SimilarityTransform:
    """Rotation (radians), isotropic scale, translation (dx, dy) in pixels.

    Applied about the image center: a content point q maps to
    center + scale * R(rotation) @ (q - center) + (dx, dy), with x along
    columns and y along rows.
    """

    rotation: float = 0.0
    scale: float = 1.0
    translation: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def inverse(self) -> "SimilarityTransform":
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        dx, dy = self.translation
        tx = -(c * dx - s * dy) / self.scale
        ty = -(s * dx + c * dy) / self.scale
        return SimilarityTransform(-self.rotation, 1.0 / self.scale, (tx, ty))


def warp_similarity(img: np.ndarray, transform: SimilarityTransform, wrap: bool = False):
    """Resample img under the similarity transform (bicubic, same dims)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[0], img.shape[1]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = transform.translation
    # invert: source = center + R(-rot)/scale @ (dst - center - t)
    px = xx - cx - dx
    py = yy - cy - dy
    c, s = math.cos(-transform.rotation), math.sin(-transform.rotation)
    sx = (c * px - s * py) / transform.scale + cx
    sy = (s * px + c * py) / transform.scale + cy
    return bicubic_sample(img, sy, sx, wrap=wrap)


def refine_alignment(lr_patch: np.ndarray, hr_label: np.ndarray, scale=Fraction(5, 2)):
    """Register a higher-resolution label onto its low-resolution patch.

    Searches rotation/scale/translation (translation in label pixels) by
    maximizing NCC between the bicubic-downsampled, transformed label and
    the patch: a coarse grid over +-4 px, +-2 deg, +-2% scale, then a
    halving pattern search to 0.02 px / 0.01 deg / 0.02% resolution.
    Returns (transform, lr_patch, aligned_label), where aligned_label is
    the label resampled by the recovered correction. Raises
    AlignmentError if no candidate reaches NCC 0.5.
    """
    scale = Fraction(scale)
    lr = np.asarray(lr_patch, dtype=np.float64)
    hr = np.asarray(hr_label, dtype=np.float64)
    lg = to_grayscale(lr) if lr.ndim == 3 else lr
    hg = to_grayscale(hr) if hr.ndim == 3 else hr
    expect = (math.ceil(hg.shape[0] / scale), math.ceil(hg.shape[1] / scale))
    if (lg.shape[0], lg.shape[1]) != expect:
        raise DimensionError(
            f"patch dims {lg.shape} do not match label {hg.shape} at scale {scale}"
        )
    inv = Fraction(1, 1) / scale
    # decimating by 2.5 without a low-pass aliases the label's fine
    # structure, and the alias pattern rotates with the candidate, which
    # drags the correlation peak off the true transform
    aa_sigma = 0.4 * float(scale)

    def score(rot, sc, dx, dy) -> float:
        t = SimilarityTransform(rot, sc, (dx, dy))
        down = bicubic_resize(gaussian_blur(warp_similarity(hg, t), aa_sigma), inv)
        return _ncc_global(down, lg)

    best = None
    best_s = -2.0
    deg = math.pi / 180.0
    for rot in (-2 * deg, -deg, 0.0, deg, 2 * deg):
        for sc in (0.98, 0.99, 1.0, 1.01, 1.02):
            for dx in (-4.0, -2.0, 0.0, 2.0, 4.0):
                for dy in (-4.0, -2.0, 0.0, 2.0, 4.0):
                    s = score(rot, sc, dx, dy)
                    if s > best_s:
                        best_s = s
                        best = [rot, sc, dx, dy]

    steps = [0.5 * deg, 0.005, 1.0, 1.0]  # rotation, scale, dx, dy
    floors = [0.01 * deg, 0.0002, 0.02, 0.02]
    rounds = 0
    while any(st > fl for st, fl in zip(steps, floors)) and rounds < 400:
        rounds += 1
        improved = False
        for axis in range(4):
            if steps[axis] <= floors[axis]:
                continue
            for sign in (1.0, -1.0):
                cand = list(best)
                cand[axis] += sign * steps[axis]
                if axis == 1 and cand[1] <= 0:
                    continue
                s = score(*cand)
                if s > best_s:
                    best_s = s
                    best = cand
                    improved = True
        if not improved:
            steps = [st / 2.0 for st in steps]

    if best_s < 0.5:
        raise AlignmentError(f"no alignment candidate reached NCC 0.5 (best {best_s:.3f})")
    transform = SimilarityTransform(best[0], best[1], (best[2], best[3]))
    aligned = warp_similarity(hr, transform)
    return transform, lr, aligned


@dataclass
class PatchPair:
    """One training example: an input patch and its upscaled label."""

    lr: np.ndarray
    hr: np.ndarray
    source_id: str = ""
    lr_pos: tuple = (0, 0)
    hr_pos: tuple = (0, 0)


def extract_patches(
    lr_img: np.ndarray,
    hr_img: np.ndarray,
    lr_patch: int = 60,
    hr_patch: int = 150,
    overlap: float = 0.4,
    source_id: str = "",
) -> list[PatchPair]:
    """Cut a registered (lr, hr) image pair into overlapping patch pairs.

    Grid positions step by round(patch * (1 - overlap)) (36 for the
    default 60-pixel patches, 90 on the label side). If the last strided
    position misses the edge, one tail-aligned position is appended,
    rounded down to keep every label position at exactly 2.5x the input
    position on the integer grid.
    """
    lr_img = np.asarray(lr_img)
    hr_img = np.asarray(hr_img)
    ratio = Fraction(hr_patch, lr_patch)
    den = ratio.denominator
    if (
        hr_img.shape[0] * lr_patch != lr_img.shape[0] * hr_patch
        or hr_img.shape[1] * lr_patch != lr_img.shape[1] * hr_patch
    ):
        raise DimensionError(
            f"label dims {hr_img.shape[:2]} are not {ratio} times input dims "
            f"{lr_img.shape[:2]}"
        )
    if lr_img.shape[0] < lr_patch or lr_img.shape[1] < lr_patch:
        raise DimensionError(
            f"input {lr_img.shape[:2]} is smaller than the patch size {lr_patch}"
        )
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    stride = int(round(lr_patch * (1.0 - overlap)))
    stride = max(stride - stride % den, den)

    def positions(dim: int) -> list[int]:
        pos = list(range(0, dim - lr_patch + 1, stride))
        tail = dim - lr_patch
        tail -= tail % den
        if tail > pos[-1]:
            pos.append(tail)
        return pos

    pairs = []
    for py in positions(lr_img.shape[0]):
        for px in positions(lr_img.shape[1]):
            hy = py * hr_patch // lr_patch
            hx = px * hr_patch // lr_patch
            pairs.append(
                PatchPair(
                    lr=lr_img[py : py + lr_patch, px : px + lr_patch].copy(),
                    hr=hr_img[hy : hy + hr_patch, hx : hx + hr_patch].copy(),
                    source_id=source_id,
                    lr_pos=(py, px),
                    hr_pos=(hy, hx),
                )
            )
    return pairs


def make_batches(pairs: Sequence, batch_size: int, seed: int) -> list[list]:
    """Seeded uniform shuffle, then contiguous batches (remainder kept)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    return [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]


def synth_degrade(hr: np.ndarray, psf_sigma: float, scale=Fraction(5, 2)) -> np.ndarray:
    """Degrade a high-resolution image to its low-resolution counterpart.

    Gaussian blur (kernel truncated at 3 sigma, normalized), then an
    area-average downsample by 1/scale: bicubic-upsample to the common
    fine grid (x2 for scale 5/2) and block-average (5x5). Internal
    resampling uses cyclic boundaries, so the mean pixel value is
    conserved exactly up to rounding; output is clamped to [0, 1].
    """
    hr = np.asarray(hr, dtype=np.float64)
    scale = Fraction(scale)
    up, block = scale.denominator, scale.numerator
    if (hr.shape[0] * up) % block or (hr.shape[1] * up) % block:
        raise DimensionError(
            f"dims {hr.shape[:2]} do not divide for exact 1/{scale} sampling"
        )
    blurred = gaussian_blur(hr, psf_sigma, wrap=True) if psf_sigma > 0 else hr
    fine = bicubic_resize(blurred, up, wrap=True)
    h5, w5 = fine.shape[0] // block, fine.shape[1] // block
    if fine.ndim == 3:
        lr = fine.reshape(h5, block, w5, block, fine.shape[2]).mean(axis=(1, 3))
    else:
        lr = fine.reshape(h5, block, w5, block).mean(axis=(1, 3))
    return np.clip(lr, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Synthetic dataset: procedural tissue-like textures.


def _value_noise(rng: np.random.Generator, size: int, grid: int) -> np.ndarray:
    g = rng.random((grid, grid))
    coords = (np.arange(size) + 0.5) * (grid / size) - 0.5
    sy, sx = np.meshgrid(coords, coords, indexing="ij")
    return bicubic_sample(g, sy, sx)


def _segment_distance(yy, xx, p0, p1):
    d = p1 - p0
    len2 = max(float(d @ d), 1e-9)
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / len2
    t = np.clip(t, 0.0, 1.0)
    cy = p0[0] + t * d[0]
    cx = p0[1] + t * d[1]
    return np.hypot(yy - cy, xx - cx)


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    base = np.zeros((size, size))
    total = 0.0
    for grid, amp in ((4, 1.0), (8, 0.55), (16, 0.3), (32, 0.18), (64, 0.1)):
        base += amp * _value_noise(rng, size, grid)
        total += amp
    base = 0.3 + 0.55 * (base / total)

    for _ in range(int(rng.integers(6, 15))):
        cy, cx = rng.uniform(0, size, 2)
        a, b = rng.uniform(3.0, 11.0, 2)
        theta = rng.uniform(0, math.pi)
        depth = rng.uniform(0.25, 0.65)
        ct, st = math.cos(theta), math.sin(theta)
        u = ((xx - cx) * ct + (yy - cy) * st) / a
        v = (-(xx - cx) * st + (yy - cy) * ct) / b
        d = np.hypot(u, v)
        edge = 0.7 * min(a, b)
        mask = np.clip((1.0 - d) * edge + 0.5, 0.0, 1.0)
        base *= 1.0 - depth * mask

    for _ in range(int(rng.integers(3, 9))):
        p0 = rng.uniform(0, size, 2)
        p1 = p0 + rng.uniform(-size / 2, size / 2, 2)
        thick = rng.uniform(0.7, 1.8)
        delta = rng.uniform(0.15, 0.45) * rng.choice((-1.0, 1.0))
        d = _segment_distance(yy, xx, p0, p1)
        mask = np.clip(thick - d + 0.5, 0.0, 1.0)
        base *= 1.0 + delta * mask

    rgb = np.empty((size, size, 3))
    for c in range(3):
        tint = _value_noise(rng, size, 6)
        rgb[..., c] = base * (0.85 + 0.3 * tint)
    return np.clip(rgb, 0.02, 0.98)


def synth_dataset(
    count: int,
    seed: int,
    hr_size: int = 150,
    psf_sigma: float = 1.0,
    scale=Fraction(5, 2),
) -> list[PatchPair]:
    """Procedural training pairs: textured labels degraded to inputs.

    Item i draws from a generator seeded by (seed, i), so the dataset is
    reproducible and any subset can be regenerated independently.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    scale = Fraction(scale)
    pairs = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        hr = _texture(rng, hr_size)
        lr = synth_degrade(hr, psf_sigma, scale)
        pairs.append(
            PatchPair(
                lr=lr.astype(np.float32),
                hr=hr.astype(np.float32),
                source_id=f"synth-{i:05d}",
            )
        )
    return pairs
