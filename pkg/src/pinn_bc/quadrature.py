"""Quadrature rules on the reference triangle ``(0,0), (1,0), (0,1)`` and on ``[0, 1]``.

Degrees 1-5 use classical fully symmetric rules; degrees 6-10 use a collapsed
(Duffy) tensor product of Gauss-Jacobi and Gauss-Legendre points, which has
positive weights and interior points. Weights sum to the reference area 1/2.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import ceil, sqrt

import numpy as np
from scipy.special import roots_jacobi

from .errors import ConfigurationError

MAX_ORDER = 10


class QuadratureOrderError(ConfigurationError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (n, 2) reference coordinates
    weights: np.ndarray  # (n,)
    order: int

    def __len__(self):
        return len(self.weights)


def _orbit3(a, w):
    b = 1.0 - 2.0 * a
    return [(a, a), (b, a), (a, b)], [w] * 3


def _orbit6(a, b, w):
    c = 1.0 - a - b
    pts = [(a, b), (b, a), (b, c), (c, b), (a, c), (c, a)]
    return pts, [w] * 6


def _symmetric(order):
    pts, wts = [], []
    if order == 1:
        pts, wts = [(1 / 3, 1 / 3)], [1.0]
    elif order == 2:
        pts, wts = _orbit3(1 / 6, 1 / 3)
    elif order == 3:
        # Strang-Fix six-point rule
        pts, wts = _orbit6(0.659027622374092, 0.231933368553031, 1 / 6)
    elif order == 4:
        for a, w in ((0.445948490915965, 0.223381589678011), (0.091576213509771, 0.109951743655322)):
            p, ww = _orbit3(a, w)
            pts += p
            wts += ww
    elif order == 5:
        s15 = sqrt(15.0)
        pts, wts = [(1 / 3, 1 / 3)], [9 / 40]
        for a, w in (((6 - s15) / 21, (155 - s15) / 1200), ((6 + s15) / 21, (155 + s15) / 1200)):
            p, ww = _orbit3(a, w)
            pts += p
            wts += ww
    pts = np.array(pts, dtype=float)
    wts = np.array(wts, dtype=float)
    return pts, 0.5 * wts / wts.sum()


def gauss_legendre_01(order):
    """Gauss-Legendre rule on ``[0, 1]`` exact for polynomials of degree ``order``."""
    n = max(1, ceil((order + 1) / 2))
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _collapsed(order):
    n = max(1, ceil((order + 1) / 2))
    # weight (1 - u) on [0, 1] <-> Jacobi(alpha=1, beta=0) on [-1, 1]
    s, ws = roots_jacobi(n, 1.0, 0.0)
    u = 0.5 * (s + 1.0)
    wu = ws / 4.0
    v, wv = gauss_legendre_01(order)
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wu, wv)
    pts = np.stack([U.ravel(), (V * (1.0 - U)).ravel()], axis=-1)
    return pts, W.ravel()


@lru_cache(maxsize=None)
def quadrature_for_order(q: int) -> QuadratureRule:
    """Positive-weight rule exact for total degree ``<= q`` on the reference triangle."""
    if int(q) != q or not 1 <= q <= MAX_ORDER:
        raise QuadratureOrderError(f"quadrature order must be an integer in [1, {MAX_ORDER}], got {q}")
    q = int(q)
    if q <= 5:
        pts, wts = _symmetric(q)
    else:
        pts, wts = _collapsed(q)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule(pts, wts, q)
