"""Exact kernels for 2x2 blocks acting on joint position-momentum states.

Every coefficient matrix in this package has the form ``M2 (x) I_d`` for a real
2x2 matrix ``M2``: the same 2x2 block acts independently on each of the d
coordinate pairs. Blocks are stored as plain ``(2, 2)`` ndarrays and states as
``(2, d)`` (or batched ``(..., 2, d)``) ndarrays, so applying a block is a
single matmul and never mixes coordinates across data dimensions.
"""

from __future__ import annotations

import numpy as np

from .errors import NotSPD, Singular

# Stabilizing shift added to the diagonal before Cholesky factorization.
CHOL_EPS = 1e-9

_SERIES_REL = 1e-12  # |r^2| < _SERIES_REL * q^2 switches to the defective branch
_SERIES_ABS = 1e-24  # absolute fallback for traceless / zero matrices


def blockmat(a: float, b: float, c: float, d: float) -> np.ndarray:
    """Row-major 2x2 block [[a, b], [c, d]]."""
    return np.array([[a, b], [c, d]], dtype=float)


IDENTITY2 = np.eye(2)


def mat_exp(m: np.ndarray, t: float = 1.0) -> np.ndarray:
    """Closed-form exp(m*t) for a real 2x2 matrix.

    Uses exp(m t) = e^{q t} (cosh(r t) I + sinh(r t)/r (m - q I)) with
    q = tr(m)/2 and r^2 = q^2 - det(m); the oscillatory case r^2 < 0 runs on
    cos/sin and the defective case r -> 0 on a truncated series, which avoids
    the catastrophic cancellation of evaluating sinh(r t)/r directly.
    """
    m = np.asarray(m, dtype=float)
    q = 0.5 * (m[0, 0] + m[1, 1])
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    r2 = q * q - det
    s = r2 * t * t
    if abs(r2) < max(_SERIES_REL * q * q, _SERIES_ABS):
        # three-term series in s = (r t)^2
        ch = 1.0 + s / 2.0 + s * s / 24.0
        sh_over_r = t * (1.0 + s / 6.0 + s * s / 120.0)
    elif r2 > 0.0:
        r = np.sqrt(r2)
        ch = np.cosh(r * t)
        sh_over_r = np.sinh(r * t) / r
    else:
        w = np.sqrt(-r2)
        ch = np.cos(w * t)
        sh_over_r = np.sin(w * t) / w
    return np.exp(q * t) * (ch * IDENTITY2 + sh_over_r * (m - q * IDENTITY2))


def det2(m: np.ndarray) -> float:
    return float(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])


def inverse2(m: np.ndarray) -> np.ndarray:
    """Inverse of a 2x2 block."""
    d = det2(m)
    if abs(d) < 1e-300:
        raise Singular(f"2x2 block is singular (det={d!r})")
    return np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]]) / d


def solve2(m: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve m @ y = rhs where rhs is a state-like array of shape (..., 2, d)."""
    return apply_to_state(inverse2(m), rhs)


def apply_to_state(m: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Apply a 2x2 block to a (..., 2, d) state: (a x + b m, c x + d m) per coordinate."""
    return np.einsum("ij,...jd->...id", m, z)


def is_spd(s: np.ndarray) -> bool:
    """SPD test for a symmetric 2x2 block via trace > 0 and det > 0."""
    return s[0, 0] + s[1, 1] > 0.0 and det2(s) > 0.0


def cholesky2(s: np.ndarray, eps: float = CHOL_EPS) -> np.ndarray:
    """Lower-triangular L with L @ L.T = s + eps*I.

    The stabilizing shift keeps factorization of near-degenerate perturbation
    kernels (t -> 0) finite.
    """
    a = s[0, 0] + eps
    b = 0.5 * (s[0, 1] + s[1, 0])
    c = s[1, 1] + eps
    d = a * c - b * b
    if a <= 0.0 or d <= 0.0:
        raise NotSPD(f"not SPD after stabilization: diag=({a}, {c}), det={d}")
    l00 = np.sqrt(a)
    l10 = b / l00
    l11 = np.sqrt(c - l10 * l10)
    return np.array([[l00, 0.0], [l10, l11]])
