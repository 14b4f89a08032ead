"""Second-order forward-mode dual numbers over 2D points.

A :class:`Jet` carries, for a batch of points, a scalar field value together
with its gradient and Hessian with respect to the two spatial coordinates.
Arithmetic and the elementary functions in this module propagate all three
exactly, which is how ADF derivatives and manufactured source terms are
obtained without symbolic algebra.

The module-level functions (:func:`sin`, :func:`sqrt`, ...) dispatch on the
argument type, so a coefficient written once as ``ops.sin(x + 2 * y)`` works
for numpy arrays, torch tensors and jets alike.
"""

from __future__ import annotations

import numpy as np

try:  # torch is a hard dependency of the package, but keep this module importable alone
    import torch
except ImportError:  # pragma: no cover
    torch = None


class Jet:
    """Value, gradient and Hessian of a scalar field at ``n`` points.

    Shapes: ``val (n,)``, ``grad (n, 2)``, ``hess (n, 2, 2)``.
    """

    __slots__ = ("val", "grad", "hess")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, val, grad, hess):
        self.val = val
        self.grad = grad
        self.hess = hess

    @classmethod
    def constant(cls, c, n):
        val = np.broadcast_to(np.asarray(c, dtype=float), (n,)).copy()
        return cls(val, np.zeros((n, 2)), np.zeros((n, 2, 2)))

    @classmethod
    def coordinates(cls, points):
        """Return the jets of ``x`` and ``y`` seeded at ``points`` (shape ``(n, 2)``)."""
        points = np.asarray(points, dtype=float)
        n = points.shape[0]
        out = []
        for k in range(2):
            g = np.zeros((n, 2))
            g[:, k] = 1.0
            out.append(cls(points[:, k].copy(), g, np.zeros((n, 2, 2))))
        return out[0], out[1]

    @property
    def laplacian(self):
        return self.hess[:, 0, 0] + self.hess[:, 1, 1]

    def __len__(self):
        return self.val.shape[0]

    # chain rule for a scalar function with derivatives d1, d2 evaluated at val
    def _apply(self, f0, d1, d2):
        g = self.grad
        hess = d1[:, None, None] * self.hess + d2[:, None, None] * (g[:, :, None] * g[:, None, :])
        return Jet(f0, d1[:, None] * g, hess)

    def _lift(self, other):
        if isinstance(other, Jet):
            return other
        return Jet.constant(other, len(self))

    def __add__(self, other):
        o = self._lift(other)
        return Jet(self.val + o.val, self.grad + o.grad, self.hess + o.hess)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.val, -self.grad, -self.hess)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        if not isinstance(other, Jet):
            c = np.asarray(other, dtype=float)
            if c.ndim == 0:
                return Jet(self.val * c, self.grad * c, self.hess * c)
            other = Jet.constant(c, len(self))
        a, b = self, other
        cross = a.grad[:, :, None] * b.grad[:, None, :]
        return Jet(
            a.val * b.val,
            a.grad * b.val[:, None] + b.grad * a.val[:, None],
            a.hess * b.val[:, None, None] + b.hess * a.val[:, None, None] + cross + cross.transpose(0, 2, 1),
        )

    __rmul__ = __mul__

    def reciprocal(self):
        v = self.val
        return self._apply(1.0 / v, -1.0 / v**2, 2.0 / v**3)

    def __truediv__(self, other):
        if not isinstance(other, Jet):
            c = np.asarray(other, dtype=float)
            if c.ndim == 0:
                return self * (1.0 / c)
            other = Jet.constant(c, len(self))
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self._lift(other) * self.reciprocal()

    def __pow__(self, p):
        if isinstance(p, Jet):
            return exp(log(self) * p)
        p = float(p)
        if p == int(p) and p >= 0:
            ip = int(p)
            if ip == 0:
                return Jet.constant(1.0, len(self))
            out = self
            for _ in range(ip - 1):
                out = out * self
            return out
        v = self.val
        with np.errstate(divide="ignore", invalid="ignore"):
            return self._apply(v**p, p * v ** (p - 1), p * (p - 1) * v ** (p - 2))

    def __getitem__(self, idx):
        return Jet(self.val[idx], self.grad[idx], self.hess[idx])

    def __repr__(self):
        return f"Jet(n={len(self)})"


def _is_torch(x):
    return torch is not None and isinstance(x, torch.Tensor)


def sin(x):
    if isinstance(x, Jet):
        s, c = np.sin(x.val), np.cos(x.val)
        return x._apply(s, c, -s)
    return torch.sin(x) if _is_torch(x) else np.sin(x)


def cos(x):
    if isinstance(x, Jet):
        s, c = np.sin(x.val), np.cos(x.val)
        return x._apply(c, -s, -c)
    return torch.cos(x) if _is_torch(x) else np.cos(x)


def exp(x):
    if isinstance(x, Jet):
        e = np.exp(x.val)
        return x._apply(e, e, e)
    return torch.exp(x) if _is_torch(x) else np.exp(x)


def log(x):
    if isinstance(x, Jet):
        v = x.val
        return x._apply(np.log(v), 1.0 / v, -1.0 / v**2)
    return torch.log(x) if _is_torch(x) else np.log(x)


def tanh(x):
    if isinstance(x, Jet):
        t = np.tanh(x.val)
        d1 = 1.0 - t * t
        return x._apply(t, d1, -2.0 * t * d1)
    return torch.tanh(x) if _is_torch(x) else np.tanh(x)


def sqrt(x):
    """Square root; derivatives are ``inf``/``nan`` where the argument vanishes."""
    if isinstance(x, Jet):
        r = np.sqrt(x.val)
        with np.errstate(divide="ignore", invalid="ignore"):
            d1 = 0.5 / r
            d2 = -0.25 / (r * x.val)
        return x._apply(r, d1, d2)
    return torch.sqrt(x) if _is_torch(x) else np.sqrt(x)


def value(x):
    """Strip derivative information."""
    return x.val if isinstance(x, Jet) else x


def evaluate(fn, points, order=2):
    """Evaluate a jet-compatible ``fn(x, y)`` at ``points``.

    Returns a :class:`Jet` for ``order >= 1`` and a plain array for ``order == 0``.
    Constant results are broadcast to the number of points.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if order == 0:
        out = fn(points[:, 0], points[:, 1])
        return np.broadcast_to(np.asarray(out, dtype=float), (n,)).copy()
    x, y = Jet.coordinates(points)
    out = fn(x, y)
    if not isinstance(out, Jet):
        out = Jet.constant(out, n)
    return out
