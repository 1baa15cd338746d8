"""Gaussian receptive-field masks over square kernel grids.

A mask is a K x K array of values in (0, 1] obtained by evaluating a
Gaussian at each cell's offset from the kernel center and dividing by the
largest cell value. Multiplying a convolution kernel by such a mask shrinks
its effective footprint smoothly; the mask never zeroes a cell outright, so
gradients keep flowing to every tap.

Two families are provided:

* circular: one sigma, isotropic, built from the Euclidean distance to the
  kernel center. For odd K the center cell sits at distance 0 and the
  normalized value there is exactly 1.
* elliptic: independent horizontal (sigma1) and vertical (sigma2) widths.

Both are computed in the exponent domain, i.e. exp(-(q - q_min) / 2) where
q is the per-cell quadratic form, so the normalization never divides by a
denormal even at the smallest admissible sigma.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_MIN = 1e-3
SIGMA_MAX = 1e6

_KINDS = ("circular", "elliptic")


def clamp_sigma(sigma: float) -> float:
    """Clamp |sigma| into [SIGMA_MIN, SIGMA_MAX], boundaries included.

    The mask is an even function of sigma, so the sign is dropped before
    clamping. Gradients with respect to sigma are defined to be zero while
    the clamp is active (see ``circular_grad``).
    """
    s = abs(float(sigma))
    if not np.isfinite(s):
        raise ValueError(f"sigma must be finite, got {sigma!r}")
    return min(max(s, SIGMA_MIN), SIGMA_MAX)


def _check_kernel_size(kernel_size: int) -> int:
    k = int(kernel_size)
    if k < 1:
        raise ValueError(f"kernel_size must be >= 1, got {kernel_size}")
    return k


@dataclass(frozen=True)
class MaskParams:
    """Parameters that produced a mask: kind, widths, and grid size."""

    kind: str
    sigma1: float
    sigma2: float
    kernel_size: int

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")


@dataclass(frozen=True)
class GaussianMask:
    """A realized mask: the K x K value grid plus the parameters behind it."""

    values: np.ndarray
    params: MaskParams

    @property
    def kernel_size(self) -> int:
        return self.params.kernel_size


def offset_grids(kernel_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (x, y) offsets of every cell from the kernel center.

    x varies along columns (horizontal), y along rows (vertical). The center
    is at (K-1)/2 in both axes, so offsets are half-integers when K is even.
    """
    k = _check_kernel_size(kernel_size)
    c = (k - 1) / 2.0
    idx = np.arange(k, dtype=np.float64)
    y = (idx - c)[:, None] * np.ones((1, k))
    x = np.ones((k, 1)) * (idx - c)[None, :]
    return x, y


def _sq_dist(kernel_size: int) -> np.ndarray:
    x, y = offset_grids(kernel_size)
    return x * x + y * y


def circular_values(sigma: float, kernel_size: int) -> np.ndarray:
    """Max-normalized isotropic Gaussian mask values, shape (K, K).

    Equal to exp(-(d^2 - d_min^2) / (2 s^2)) where d is the Euclidean
    distance of a cell from the kernel center, d_min the smallest such
    distance on the grid (0 for odd K), and s the clamped sigma. The 1D
    Gaussian's prefactor cancels in the normalization, so it never appears.
    """
    s = clamp_sigma(sigma)
    d2 = _sq_dist(kernel_size)
    return np.exp(-(d2 - d2.min()) / (2.0 * s * s))


def circular_grad_values(sigma: float, kernel_size: int) -> np.ndarray:
    """d(mask)/d(sigma) for the circular mask, shape (K, K).

    Exact for the shipped normalized form: M * (d^2 - d_min^2) / s^3,
    which reduces to M * d^2 / s^3 for odd K. The convention at the clamp
    is closed gating: the derivative is zero everywhere once |sigma| sits
    at or beyond either boundary, so a clamped width stays put. Inside the
    open interval the sign of sigma carries through via s^3.
    """
    raw = float(sigma)
    s = abs(raw)
    if s <= SIGMA_MIN or s >= SIGMA_MAX:
        k = _check_kernel_size(kernel_size)
        return np.zeros((k, k))
    d2 = _sq_dist(kernel_size)
    m = np.exp(-(d2 - d2.min()) / (2.0 * s * s))
    # sign(sigma) via raw**3: mask(sigma) is even, so its slope is odd.
    return m * (d2 - d2.min()) / (raw * raw * raw)


def elliptic_values(sigma1: float, sigma2: float, kernel_size: int) -> np.ndarray:
    """Max-normalized anisotropic Gaussian mask values, shape (K, K).

    sigma1 controls the horizontal width (the x offset, along columns) and
    sigma2 the vertical width (the y offset, along rows). Normalization
    subtracts the per-axis minimum quadratic term in the exponent; on a
    Cartesian grid that equals dividing by the true maximum cell value.
    """
    s1 = clamp_sigma(sigma1)
    s2 = clamp_sigma(sigma2)
    x, y = offset_grids(kernel_size)
    qx = x * x / (s1 * s1)
    qy = y * y / (s2 * s2)
    q = qx + qy
    return np.exp(-0.5 * (q - (qx.min() + qy.min())))


def elliptic_grad_values(
    sigma1: float, sigma2: float, kernel_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """(d(mask)/d(sigma1), d(mask)/d(sigma2)) for the elliptic mask.

    Same clamp-gates-gradient rule as the circular case, applied per axis.
    """
    k = _check_kernel_size(kernel_size)
    m = elliptic_values(sigma1, sigma2, kernel_size)
    x, y = offset_grids(k)
    out = []
    for raw, offs in ((float(sigma1), x), (float(sigma2), y)):
        s = abs(raw)
        if s <= SIGMA_MIN or s >= SIGMA_MAX:
            out.append(np.zeros((k, k)))
            continue
        o2 = offs * offs
        out.append(m * (o2 - o2.min()) / (raw * raw * raw))
    return out[0], out[1]


def circular_mask(sigma: float, kernel_size: int) -> GaussianMask:
    """Build a circular mask object; sigma is recorded after clamping."""
    s = clamp_sigma(sigma)
    vals = circular_values(sigma, kernel_size)
    params = MaskParams("circular", s, s, _check_kernel_size(kernel_size))
    return GaussianMask(vals, params)


def elliptic_mask(sigma1: float, sigma2: float, kernel_size: int) -> GaussianMask:
    """Build an elliptic mask object; sigmas are recorded after clamping."""
    s1 = clamp_sigma(sigma1)
    s2 = clamp_sigma(sigma2)
    vals = elliptic_values(sigma1, sigma2, kernel_size)
    params = MaskParams("elliptic", s1, s2, _check_kernel_size(kernel_size))
    return GaussianMask(vals, params)


def elliptic_values_batch(
    sigma1: np.ndarray, sigma2: np.ndarray, kernel_size: int
) -> np.ndarray:
    """Vectorized elliptic masks for per-sample sigmas, shape (N, K, K).

    Inputs are 1D arrays of equal length; each sigma is clamped elementwise
    exactly as in the scalar path.
    """
    s1 = np.clip(np.abs(np.asarray(sigma1, dtype=np.float64)), SIGMA_MIN, SIGMA_MAX)
    s2 = np.clip(np.abs(np.asarray(sigma2, dtype=np.float64)), SIGMA_MIN, SIGMA_MAX)
    if s1.shape != s2.shape or s1.ndim != 1:
        raise ValueError("sigma arrays must be 1D and the same length")
    x, y = offset_grids(kernel_size)
    qx = x[None] / (s1[:, None, None] ** 2) * x[None]
    qy = y[None] / (s2[:, None, None] ** 2) * y[None]
    qx_min = qx.min(axis=(1, 2), keepdims=True)
    qy_min = qy.min(axis=(1, 2), keepdims=True)
    return np.exp(-0.5 * (qx + qy - qx_min - qy_min))


def elliptic_grad_batch(
    sigma1: np.ndarray, sigma2: np.ndarray, kernel_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (dM/dsigma1, dM/dsigma2), each shape (N, K, K)."""
    s1_raw = np.asarray(sigma1, dtype=np.float64)
    s2_raw = np.asarray(sigma2, dtype=np.float64)
    m = elliptic_values_batch(s1_raw, s2_raw, kernel_size)
    x, y = offset_grids(kernel_size)
    grads = []
    for raw, offs in ((s1_raw, x), (s2_raw, y)):
        o2 = offs * offs
        centered = (o2 - o2.min())[None]
        active = (np.abs(raw) > SIGMA_MIN) & (np.abs(raw) < SIGMA_MAX)
        denom = np.where(active, raw, 1.0) ** 3
        g = m * centered / denom[:, None, None]
        g[~active] = 0.0
        grads.append(g)
    return grads[0], grads[1]


def export_mask(mask: GaussianMask, path: str, fmt: str = "csv") -> None:
    """Write a mask grid to disk as CSV or 16-bit ASCII PGM.

    CSV cells use the %.17g format so values round-trip bit-exactly through
    text. PGM output is the P2 variant with maxval 65535; each cell is
    round(value * 65535), which is lossy by design (preview format).
    """
    if fmt == "csv":
        write_grid_csv(mask.values, path)
    elif fmt == "pgm":
        write_grid_pgm(mask.values, path)
    else:
        raise ValueError(f"unknown export format {fmt!r} (expected 'csv' or 'pgm')")


def write_grid_csv(grid: np.ndarray, path: str) -> None:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"expected a 2D grid, got shape {g.shape}")
    with open(path, "w", encoding="ascii") as fh:
        for row in g:
            fh.write(",".join("%.17g" % v for v in row))
            fh.write("\n")


def read_grid_csv(path: str) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rows.append([float(tok) for tok in line.split(",")])
    if not rows:
        raise ValueError(f"{path}: empty grid file")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: ragged rows")
    return np.array(rows, dtype=np.float64)


def write_grid_pgm(grid: np.ndarray, path: str) -> None:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"expected a 2D grid, got shape {g.shape}")
    if g.min() < 0.0 or g.max() > 1.0:
        raise ValueError("PGM export expects values in [0, 1]")
    levels = np.rint(g * 65535.0).astype(np.int64)
    h, w = g.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write("P2\n")
        fh.write(f"{w} {h}\n")
        fh.write("65535\n")
        for row in levels:
            fh.write(" ".join(str(int(v)) for v in row))
            fh.write("\n")
