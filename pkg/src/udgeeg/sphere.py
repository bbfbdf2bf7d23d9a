"""Quasi-analytic surface potentials of a current dipole in concentric spheres.

The potential inside the innermost shell is expanded as

    u(x) = 1/(4 pi sigma_in) * sum_n Y_n(x_hat) * (r^-(n+1) + A_n r^n)

where ``Y_n(x_hat) = M . grad_x0 [ |x0|^n P_n(x_hat . x0_hat) ]`` is the degree-n
angular pattern of the dipole.  In every outer shell the radial factor is a
combination ``A r^n + B r^-(n+1)``; continuity of the potential and of the
normal current across each interface gives a 2x2 transfer per degree, and the
insulating outer surface fixes ``A_n``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .source import DipoleSource
from .transfer import ElectrodeSet

__all__ = [
    "SphereModel",
    "SeriesControl",
    "SeriesNotConverged",
    "four_sphere_model",
    "surface_factors",
    "surface_potential",
    "analytic_potential",
    "homogeneous_sphere_potential",
]

FOUR_SPHERE_RADII = (92.0, 86.0, 80.0, 78.0)
FOUR_SPHERE_SIGMA = (0.43, 0.01, 1.79, 0.33)
FOUR_SPHERE_LABELS = ("skin", "skull", "csf", "brain")


class SeriesNotConverged(RuntimeError):
    def __init__(self, message: str, tail_estimate: float):
        super().__init__(message)
        self.tail_estimate = tail_estimate


@dataclass(frozen=True)
class SphereModel:
    """Concentric isotropic shells, outermost first."""

    radii: tuple[float, ...]
    conductivities: tuple[float, ...]
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        radii = tuple(float(r) for r in self.radii)
        sigma = tuple(float(s) for s in self.conductivities)
        if len(radii) == 0 or len(radii) != len(sigma):
            raise ValueError("need one conductivity per shell")
        if any(r <= 0 for r in radii) or any(a <= b for a, b in zip(radii, radii[1:])):
            raise ValueError(f"radii must be positive and strictly descending: {radii}")
        if any(s <= 0 for s in sigma):
            raise ValueError("conductivities must be positive")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "conductivities", sigma)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def outer_radius(self) -> float:
        return self.radii[0]

    @property
    def inner_radius(self) -> float:
        return self.radii[-1]


def four_sphere_model(center=(0.0, 0.0, 0.0)) -> SphereModel:
    return SphereModel(FOUR_SPHERE_RADII, FOUR_SPHERE_SIGMA, center=center, labels=FOUR_SPHERE_LABELS)


@dataclass(frozen=True)
class SeriesControl:
    max_degree: int = 200
    tail_tol: float = 1e-10

    def __post_init__(self):
        if self.max_degree < 1:
            raise ValueError("max_degree must be >= 1")


def surface_factors(model: SphereModel, max_degree: int) -> np.ndarray:
    """Scaled radial factors at the outer surface for degrees 0..max_degree.

    Lengths are scaled by the outer radius.  Entry ``n`` is the outer-surface
    value of the solution whose inner part is ``(r / r_in)^-(n+1) + A_n r^n``,
    i.e. the unit-amplitude inner solution normalised at the inner radius
    ``r_in``.  Entry 0 is unused (zero).

    The recursion runs inwards from the insulated surface on interface values
    ``(A r^n, B r^-(n+1))`` with one log scale per degree, so no power of the
    radii is formed explicitly and nothing overflows at high degree.
    """
    R = model.outer_radius
    rho = np.array(model.radii, dtype=float) / R  # outermost first, rho[0] = 1
    sigma = np.array(model.conductivities, dtype=float)
    n = np.arange(1, max_degree + 1, dtype=float)
    # insulated surface: n a = (n + 1) b
    a, b = n + 1.0, n.copy()
    log_scale = np.zeros_like(n)
    for k in range(len(rho) - 1):
        # cross interface k (radius rho[k + 1]) inwards after moving from rho[k]
        q = rho[k + 1] / rho[k]
        a = a * np.exp(n * np.log(q))
        b = b * np.exp(-(n + 1.0) * np.log(q))
        s = sigma[k] / sigma[k + 1]
        a, b = (((n + 1 + s * n) * a + (n + 1) * (1.0 - s) * b) / (2 * n + 1),
                (n * (1.0 - s) * a + (n + s * (n + 1)) * b) / (2 * n + 1))
        m = np.maximum(np.abs(a), np.abs(b))
        a, b = a / m, b / m
        log_scale += np.log(m)
    out = np.zeros(max_degree + 1)
    # surface value a + b = 2n + 1 in the starting normalisation
    with np.errstate(under="ignore"):
        out[1:] = (2 * n + 1) * np.exp(-log_scale) / b
    return out


def _angular_terms(n_max, cos_g, t, m_rad, m_el):
    """Y_n for n = 1..n_max, shape (n_max, n_el); ``t`` is the dipole radius over the inner radius."""
    n_el = cos_g.shape[0]
    Y = np.empty((n_max, n_el))
    p_prev, p_cur = np.ones_like(cos_g), cos_g.copy()
    dp_prev, dp_cur = np.zeros_like(cos_g), np.ones_like(cos_g)
    tpow = 1.0
    for n in range(1, n_max + 1):
        Y[n - 1] = tpow * (n * p_cur * m_rad + dp_cur * (m_el - cos_g * m_rad))
        p_next = ((2 * n + 1) * cos_g * p_cur - n * p_prev) / (n + 1)
        dp_next = dp_prev + (2 * n + 1) * p_cur
        p_prev, p_cur = p_cur, p_next
        dp_prev, dp_cur = dp_cur, dp_next
        tpow *= t
    return Y


def surface_potential(model: SphereModel, position, moment, points,
                      sc: SeriesControl | None = None, factors: np.ndarray | None = None) -> np.ndarray:
    """Absolute potential on the outer surface in the directions of ``points``.

    Units follow the inputs (mm, S/m, A*mm); no reference is subtracted.
    """
    sc = sc or SeriesControl()
    R = model.outer_radius
    c = np.asarray(model.center)
    x0 = (np.asarray(position, dtype=float) - c) / R
    M = np.asarray(moment, dtype=float)
    P = np.atleast_2d(np.asarray(points, dtype=float)) - c
    t = float(np.linalg.norm(x0))
    if t * R >= model.inner_radius:
        raise ValueError(
            f"dipole at radius {t * R:.6g} mm is not inside the innermost shell ({model.inner_radius} mm)")
    xhat = P / np.linalg.norm(P, axis=1, keepdims=True)
    x0hat = x0 / t if t > 0 else np.array([0.0, 0.0, 1.0])
    cos_g = np.clip(xhat @ x0hat, -1.0, 1.0)
    m_rad = float(M @ x0hat)
    m_el = xhat @ M
    if factors is None or factors.shape[0] <= sc.max_degree:
        factors = surface_factors(model, sc.max_degree)
    r_in = model.inner_radius / R
    Y = _angular_terms(sc.max_degree, cos_g, t / r_in, m_rad, m_el)
    terms = factors[1:sc.max_degree + 1, None] * Y
    total = terms.sum(axis=0)
    scale = np.max(np.abs(total))
    if scale > 0:
        last = np.max(np.abs(terms[-1]))
        ratio = t / r_in
        tail = last * ratio / (1.0 - ratio) / scale
        if tail >= sc.tail_tol:
            raise SeriesNotConverged(
                f"series not converged at degree {sc.max_degree} (tail estimate {tail:.3g})", tail)
    sigma_in = model.conductivities[-1]
    # Y_n carries (t / r_in)^(n-1); the missing r_in^-2 restores the scaling of the factors
    return total / (4.0 * np.pi * sigma_in * (R * r_in) ** 2)


def analytic_potential(model: SphereModel, dipole: DipoleSource, electrodes: ElectrodeSet,
                       sc: SeriesControl | None = None, factors: np.ndarray | None = None) -> np.ndarray:
    """Electrode potentials u(p_k) - u(p0), k = 1..N_e."""
    if not np.any(dipole.moment):
        return np.zeros(len(electrodes.electrodes))
    pts = np.vstack([electrodes.reference[None, :], electrodes.electrodes])
    u = surface_potential(model, dipole.position, dipole.moment, pts, sc, factors)
    return u[1:] - u[0]


def homogeneous_sphere_potential(radius: float, sigma: float, position, moment, points,
                                 center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Closed-form surface potential of a dipole in a single insulated sphere.

    Points are projected radially onto the sphere surface.
    """
    c = np.asarray(center, dtype=float)
    x0 = np.asarray(position, dtype=float) - c
    M = np.asarray(moment, dtype=float)
    P = np.atleast_2d(np.asarray(points, dtype=float)) - c
    r = radius * P / np.linalg.norm(P, axis=1, keepdims=True)
    d = r - x0
    dn = np.linalg.norm(d, axis=1)
    den = radius * (radius * radius - r @ x0 + radius * dn)
    first = 2.0 * (d @ M) / dn**3
    second = ((r + radius * d / dn[:, None]) @ M) / den
    return (first + second) / (4.0 * np.pi * sigma)
