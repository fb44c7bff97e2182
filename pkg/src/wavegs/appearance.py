"""View-dependent color: real spherical harmonics with optional
Ricker-wavelet time modulation of the coefficients.

Background nodes carry static SH coefficients. Object nodes realize every
SH coefficient as a weighted sum of d Ricker child wavelets over
normalized scene time, h(t) = sum_i w_i psi(t; a_i, b_i), so appearance
varies smoothly both with view direction and with time. The directional
basis stays analytic; only the coefficients move.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

# Real SH normalization constants, degrees 0..3 (orthonormal convention).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
         1.0925484305920792, 0.5462742152960396)
SH_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
         0.3731763325901154, 0.4570457994644658, 1.445305721320277,
         0.5900435899266435)

MAX_SH_DEGREE = 3


def sh_basis_size(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(directions: Array, degree: int) -> Array:
    """Real SH basis values at unit directions, (..., 3) -> (..., (deg+1)^2).

    Flattening is (l, m) row-major: [Y00, Y1-1, Y10, Y11, Y2-2, ...] with
    the sign convention of the splatting literature.
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_SH_DEGREE}]")
    d = np.asarray(directions, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (sh_basis_size(degree),), dtype=np.float64)
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = -SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (3.0 * zz - 1.0)
        out[..., 7] = -SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = -SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = -SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = -SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = -SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_gradient(directions: Array, degree: int) -> Array:
    """d(sh_basis)/d(direction), (..., 3) -> (..., (deg+1)^2, 3)."""
    d = np.asarray(directions, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    n = sh_basis_size(degree)
    grad = np.zeros(d.shape[:-1] + (n, 3), dtype=np.float64)
    if degree >= 1:
        grad[..., 1, 1] = -SH_C1
        grad[..., 2, 2] = SH_C1
        grad[..., 3, 0] = -SH_C1
    if degree >= 2:
        grad[..., 4, 0] = SH_C2[0] * y
        grad[..., 4, 1] = SH_C2[0] * x
        grad[..., 5, 1] = -SH_C2[1] * z
        grad[..., 5, 2] = -SH_C2[1] * y
        grad[..., 6, 2] = SH_C2[2] * 6.0 * z
        grad[..., 7, 0] = -SH_C2[3] * z
        grad[..., 7, 2] = -SH_C2[3] * x
        grad[..., 8, 0] = SH_C2[4] * 2.0 * x
        grad[..., 8, 1] = -SH_C2[4] * 2.0 * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        grad[..., 9, 0] = -SH_C3[0] * 6.0 * x * y
        grad[..., 9, 1] = -SH_C3[0] * (3.0 * xx - 3.0 * yy)
        grad[..., 10, 0] = SH_C3[1] * y * z
        grad[..., 10, 1] = SH_C3[1] * x * z
        grad[..., 10, 2] = SH_C3[1] * x * y
        grad[..., 11, 0] = -SH_C3[2] * y * (-2.0 * x)
        grad[..., 11, 1] = -SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        grad[..., 11, 2] = -SH_C3[2] * 8.0 * y * z
        grad[..., 12, 0] = SH_C3[3] * (-6.0 * x * z)
        grad[..., 12, 1] = SH_C3[3] * (-6.0 * y * z)
        grad[..., 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        grad[..., 13, 0] = -SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        grad[..., 13, 1] = -SH_C3[4] * (-2.0 * x * y)
        grad[..., 13, 2] = -SH_C3[4] * 8.0 * x * z
        grad[..., 14, 0] = SH_C3[5] * 2.0 * x * z
        grad[..., 14, 1] = -SH_C3[5] * 2.0 * y * z
        grad[..., 14, 2] = SH_C3[5] * (xx - yy)
        grad[..., 15, 0] = -SH_C3[6] * (3.0 * xx - 3.0 * yy)
        grad[..., 15, 1] = -SH_C3[6] * (-6.0 * x * y)
    return grad


def eval_sh_basis(direction: Array, degree: int) -> Array:
    """Basis values for a single unit direction, with validation."""
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(direction)
    if norm < 1e-12:
        raise ValueError("zero-length direction")
    if abs(norm - 1.0) > 1e-6:
        raise ValueError("direction must be unit length within 1e-6")
    return sh_basis(direction, degree)


def ricker(t, a, b):
    """Ricker (mexican hat) wavelet at time t with scale a > 0, shift b.

    psi = 2 / (sqrt(3a) pi^(1/4)) (1 - (tau/a)^2) exp(-tau^2 / (2 a^2)),
    tau = t - b. Broadcasts over array inputs.
    """
    a = np.asarray(a, dtype=np.float64)
    if np.any(a <= 0):
        raise ValueError("ricker scale must be positive")
    tau = np.asarray(t, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    norm = 2.0 / (np.sqrt(3.0 * a) * np.pi**0.25)
    r2 = (tau / a) ** 2
    return norm * (1.0 - r2) * np.exp(-0.5 * r2)


def ricker_with_grads(t, a, b):
    """(psi, dpsi/da, dpsi/db) with the same broadcasting as ricker()."""
    a = np.asarray(a, dtype=np.float64)
    if np.any(a <= 0):
        raise ValueError("ricker scale must be positive")
    tau = np.asarray(t, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    norm = 2.0 / (np.sqrt(3.0 * a) * np.pi**0.25)
    r2 = (tau / a) ** 2
    gauss = np.exp(-0.5 * r2)
    psi = norm * (1.0 - r2) * gauss
    # dpsi/dtau = -norm * gauss * (tau/a^2) * (3 - r2); db = -dtau
    dpsi_dtau = -norm * gauss * (tau / a**2) * (3.0 - r2)
    # scale derivative: product rule over norm, polynomial and gaussian
    dpsi_da = (
        -0.5 * psi / a
        + norm * gauss * (2.0 * r2 / a)
        + norm * (1.0 - r2) * gauss * (r2 / a)
    )
    return psi, dpsi_da, -dpsi_dtau


@dataclass
class ShCoefficients:
    """Static SH appearance for one Gaussian: coeffs (3, (degree+1)^2)."""

    degree: int
    coeffs: Array

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        expected = (3, sh_basis_size(self.degree))
        if self.coeffs.shape != expected:
            raise ValueError(f"coeffs must have shape {expected}")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("coefficients must be finite")


@dataclass
class WaveletPack:
    """Wavelet triples for one modulated coefficient: d (weight, scale,
    translation) entries. Scales are stored as logs so positivity is a
    reparameterization, not a constraint."""

    weights: Array
    log_scales: Array
    translations: Array

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        self.log_scales = np.atleast_1d(np.asarray(self.log_scales, dtype=np.float64))
        self.translations = np.atleast_1d(
            np.asarray(self.translations, dtype=np.float64)
        )
        if not (
            self.weights.shape == self.log_scales.shape == self.translations.shape
        ):
            raise ValueError("wavelet triple arrays must share one shape")
        if self.weights.ndim != 1 or self.weights.size < 1:
            raise ValueError("wavelet dimension d must be >= 1")

    @property
    def dimension(self) -> int:
        return self.weights.size

    def scales(self) -> Array:
        return np.exp(self.log_scales)


def eval_time_coefficient(pack: WaveletPack, t: float) -> float:
    """h(t) = sum_i w_i psi(t; a_i, b_i) for one coefficient."""
    psi = ricker(t, pack.scales(), pack.translations)
    return float(np.dot(pack.weights, psi))


def wavelet_sum(weights: Array, log_scales: Array, translations: Array, t: float) -> Array:
    """Batch form of eval_time_coefficient: sums the last axis (d)."""
    psi = ricker(t, np.exp(log_scales), translations)
    return np.sum(weights * psi, axis=-1)


def constant_fit_weights(dimension: int, scale: float = 0.3, grid: int = 64) -> Array:
    """Least-squares wavelet weights approximating the constant function 1
    over t in [0, 1], for evenly spread translations and a shared scale.

    Used to seed object packs so h(t) starts at a static color fit; by
    linearity w = target * constant_fit_weights(d).
    """
    translations = default_translations(dimension)
    t = np.linspace(0.0, 1.0, grid)
    basis = ricker(t[:, None], scale, translations[None, :])
    w, *_ = np.linalg.lstsq(basis, np.ones(grid), rcond=None)
    return w


def fit_wavelet_weights(
    targets: Array, times: Array, dimension: int, scale: float = 0.3
) -> Array:
    """Least-squares weights reproducing target values at given times.

    targets (..., nt), times (nt,) -> weights (..., d). Shared evenly
    spread translations and scale; used by the synthetic-scene generator.
    """
    translations = default_translations(dimension)
    times = np.asarray(times, dtype=np.float64)
    basis = ricker(times[:, None], scale, translations[None, :])  # (nt, d)
    targets = np.asarray(targets, dtype=np.float64)
    flat = targets.reshape(-1, targets.shape[-1])
    sol, *_ = np.linalg.lstsq(basis, flat.T, rcond=None)
    return sol.T.reshape(targets.shape[:-1] + (dimension,))


def default_translations(dimension: int) -> Array:
    """Evenly spread wavelet centers over normalized time [0, 1]."""
    return (np.arange(dimension) + 0.5) / dimension


def eval_color(
    sh_coeffs: Array,
    directions: Array,
    degree: int,
) -> Array:
    """Colors from per-item SH coefficients (n, 3, k) at unit directions
    (n, 3): clamp(sum_k h_k Y_k + 0.5, 0, 1)."""
    basis = sh_basis(directions, degree)                      # (n, k)
    raw = np.einsum("nck,nk->nc", np.asarray(sh_coeffs, dtype=np.float64), basis)
    return np.clip(raw + 0.5, 0.0, 1.0)
