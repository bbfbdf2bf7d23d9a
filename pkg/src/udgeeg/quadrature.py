"""Quadrature rules on reference simplices, squares and cubes."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

MAX_ORDER = 20


def _check(order: int):
    if not 1 <= int(order) <= MAX_ORDER:
        raise ValueError(f"unsupported quadrature order {order} (1..{MAX_ORDER})")


def _jacobi01(m: int, alpha: int):
    """Gauss-Jacobi on [0, 1] for the weight (1-u)^alpha."""
    if alpha == 0:
        x, w = roots_legendre(m)
    else:
        x, w = roots_jacobi(m, alpha, 0.0)
    return (1.0 + x) / 2.0, w / 2.0 ** (alpha + 1)


@lru_cache(maxsize=None)
def gauss_line(order: int):
    """Gauss-Legendre on [0, 1]; weights sum to 1."""
    _check(order)
    m = (order + 2) // 2
    x, w = roots_legendre(m)
    return (1.0 + x) / 2.0, w / 2.0


@lru_cache(maxsize=None)
def tet_rule(order: int):
    """Barycentric points (q, 4) and weights summing to 1."""
    _check(order)
    if order == 1:
        return np.full((1, 4), 0.25), np.ones(1)
    if order == 2:
        a, b = 0.5854101966249685, 0.1381966011250105
        lam = np.full((4, 4), b)
        np.fill_diagonal(lam, a)
        return lam, np.full(4, 0.25)
    m = (order + 2) // 2
    u, wu = _jacobi01(m, 2)
    v, wv = _jacobi01(m, 1)
    s, ws = _jacobi01(m, 0)
    U, V, S = np.meshgrid(u, v, s, indexing="ij")
    W = (wu[:, None, None] * wv[None, :, None] * ws[None, None, :]).ravel() * 6.0
    l1 = U.ravel()
    l2 = ((1 - U) * V).ravel()
    l3 = ((1 - U) * (1 - V) * S).ravel()
    lam = np.stack([1.0 - l1 - l2 - l3, l1, l2, l3], axis=1)
    return lam, W


@lru_cache(maxsize=None)
def tri_rule(order: int):
    """Barycentric points (q, 3) and weights summing to 1."""
    _check(order)
    if order == 1:
        return np.full((1, 3), 1.0 / 3.0), np.ones(1)
    if order == 2:
        lam = np.full((3, 3), 1.0 / 6.0)
        np.fill_diagonal(lam, 2.0 / 3.0)
        return lam, np.full(3, 1.0 / 3.0)
    m = (order + 2) // 2
    u, wu = _jacobi01(m, 1)
    v, wv = _jacobi01(m, 0)
    U, V = np.meshgrid(u, v, indexing="ij")
    W = (wu[:, None] * wv[None, :]).ravel() * 2.0
    l1 = U.ravel()
    l2 = ((1 - U) * V).ravel()
    lam = np.stack([1.0 - l1 - l2, l1, l2], axis=1)
    return lam, W


@lru_cache(maxsize=None)
def square_rule(order: int):
    x, w = gauss_line(order)
    X, Y = np.meshgrid(x, x, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1), np.outer(w, w).ravel()


@lru_cache(maxsize=None)
def cube_rule(order: int):
    x, w = gauss_line(order)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    W = (w[:, None, None] * w[None, :, None] * w[None, None, :]).ravel()
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1), W
