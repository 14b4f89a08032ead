"""Full-batch ADAM with exponential learning-rate decay, then (L-)BFGS.

Optimizers work on flat float64 numpy vectors and call an ``oracle(w)``
returning ``(loss, gradient)``. An optional ``monitor(epoch, w)`` returns a
scalar (typically an H1 error) that is logged every ``log_every`` epochs.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.optimize import line_search

try:  # not re-exported publicly
    from scipy.optimize._linesearch import LineSearchWarning
except ImportError:  # pragma: no cover
    LineSearchWarning = RuntimeWarning

from .errors import ConfigurationError

log = logging.getLogger(__name__)

Oracle = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class AdamConfig:
    lr0: float = 1e-3
    decay_rate: Optional[float] = None  # None: decay by 10x over the run
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 2000

    def __post_init__(self):
        if self.decay_rate is None:
            self.decay_rate = 0.1 ** (1.0 / max(self.epochs, 1))
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("ADAM moment parameters must lie in (0, 1)")
        if self.lr0 <= 0 or not 0 < self.decay_rate <= 1:
            raise ConfigurationError("need lr0 > 0 and 0 < decay_rate <= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")

    def learning_rate(self, k: int) -> float:
        return self.lr0 * self.decay_rate**k


@dataclass
class QuasiNewtonConfig:
    memory: Optional[int] = 50  # None means dense BFGS
    max_iters: int = 500
    c1: float = 1e-4
    c2: float = 0.9
    gtol: float = 1e-12

    def __post_init__(self):
        if self.memory is not None and self.memory < 1:
            raise ConfigurationError("L-BFGS memory must be >= 1")
        if self.max_iters < 0:
            raise ConfigurationError("max_iters must be non-negative")


@dataclass
class TrainRecord:
    loss: List[float] = field(default_factory=list)
    phase: List[str] = field(default_factory=list)
    errors: List[Tuple[int, float]] = field(default_factory=list)
    phase_boundary: Optional[int] = None
    stop_reason: str = ""

    @property
    def epochs(self):
        return len(self.loss)

    def log(self, loss, phase):
        self.loss.append(float(loss))
        self.phase.append(phase)

    def extend(self, other: "TrainRecord"):
        offset = len(self.loss)
        self.loss += other.loss
        self.phase += other.phase
        self.errors += [(e + offset, v) for e, v in other.errors]
        self.stop_reason = other.stop_reason or self.stop_reason

    def to_dict(self):
        return {
            "loss": self.loss,
            "phase": self.phase,
            "errors": [list(e) for e in self.errors],
            "phase_boundary": self.phase_boundary,
            "stop_reason": self.stop_reason,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["loss"]), list(d["phase"]), [tuple(e) for e in d["errors"]], d["phase_boundary"],
                   d["stop_reason"])

    def write_csv(self, path):
        """Columns ``epoch, phase, loss, h1_error`` (blank when not logged)."""
        errs = dict(self.errors)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "phase", "loss", "h1_error"])
            for k, (l, p) in enumerate(zip(self.loss, self.phase)):
                e = errs.get(k)
                wr.writerow([k, p, repr(l), "" if e is None else repr(e)])


def _monitor(record, monitor, log_every, k, w):
    if monitor is not None and log_every and k % log_every == 0:
        record.errors.append((k, float(monitor(w))))


def adam_run(oracle: Oracle, w0, cfg: AdamConfig, monitor=None, log_every=0):
    """Plain ADAM with step size ``lr0 * decay_rate**k`` at epoch ``k``.

    The record holds the loss at every visited iterate (``epochs + 1`` entries
    on a clean run, the last one for the returned weights).
    """
    w = np.array(w0, dtype=float, copy=True)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    rec = TrainRecord()
    b1, b2 = cfg.beta1, cfg.beta2
    for k in range(cfg.epochs + 1):
        loss, g = oracle(w)
        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
            rec.stop_reason = f"non-finite loss or gradient at epoch {k}"
            log.warning(rec.stop_reason)
            return w, rec
        rec.log(loss, "adam")
        _monitor(rec, monitor, log_every, k, w)
        if k == cfg.epochs:
            break
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** (k + 1))
        vhat = v / (1 - b2 ** (k + 1))
        w = w - cfg.learning_rate(k) * mhat / (np.sqrt(vhat) + cfg.eps)
    rec.stop_reason = "max epochs"
    return w, rec


class _Cached:
    """Memoize the last few oracle calls so the line search can query f and f' separately."""

    def __init__(self, oracle):
        self.oracle = oracle
        self.cache = {}

    def __call__(self, w):
        key = w.tobytes()
        if key not in self.cache:
            if len(self.cache) > 8:
                self.cache.clear()
            self.cache[key] = self.oracle(w)
        return self.cache[key]

    def f(self, w):
        return self(w)[0]

    def g(self, w):
        return self(w)[1]


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((rho, a))
        q -= a * y
    if S:
        s, y = S[-1], Y[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _wolfe_step(f, w, d, g, loss, old_loss, cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LineSearchWarning)
        alpha, *_ = line_search(f.f, f.g, w, d, gfk=g, old_fval=loss, old_old_fval=old_loss, c1=cfg.c1, c2=cfg.c2,
                                maxiter=30)
    return alpha


def quasi_newton_run(oracle: Oracle, w0, cfg: QuasiNewtonConfig, monitor=None, log_every=0):
    """(L-)BFGS with a strong-Wolfe line search.

    Stops at ``max_iters``, when the gradient norm drops below ``gtol``, when
    two consecutive iterates are bitwise identical, or when the line search
    fails (the best iterate so far is returned).
    """
    f = _Cached(oracle)
    w = np.array(w0, dtype=float, copy=True)
    loss, g = f(w)
    rec = TrainRecord()
    rec.log(loss, "bfgs")
    _monitor(rec, monitor, log_every, 0, w)
    S, Y = [], []
    Hinv = None if cfg.memory is not None else np.eye(len(w))
    rec.stop_reason = "max iterations"
    # initial step guess ~ 1/|g| on the first iteration, as in scipy's own BFGS
    old_loss = loss + 0.5 * float(np.linalg.norm(g))
    for it in range(1, cfg.max_iters + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0:
            rec.stop_reason = "identical iterates"
            break
        if gnorm < cfg.gtol:
            rec.stop_reason = "gradient tolerance"
            break
        if Hinv is None:
            d = _two_loop(g, S, Y)
        else:
            d = -Hinv @ g
        if not d @ g < 0:
            S.clear()
            Y.clear()
            if Hinv is not None:
                Hinv = np.eye(len(w))
            d = -g
        alpha = _wolfe_step(f, w, d, g, loss, old_loss, cfg)
        if alpha is None and (S or it > 1):
            # drop the curvature history and retry along steepest descent
            S.clear()
            Y.clear()
            if Hinv is not None:
                Hinv = np.eye(len(w))
            d = -g
            alpha = _wolfe_step(f, w, d, g, loss, loss + 0.5 * gnorm, cfg)
        if alpha is None:
            rec.stop_reason = "line search failure"
            break
        w_new = w + alpha * d
        loss_new, g_new = f(w_new)
        if np.array_equal(w_new, w):
            rec.stop_reason = "identical iterates"
            break
        if loss_new > loss:
            rec.stop_reason = "line search failure"
            break
        s, y = w_new - w, g_new - g
        old_loss = loss
        w, loss, g = w_new, loss_new, g_new
        rec.log(loss, "bfgs")
        _monitor(rec, monitor, log_every, it, w)
        sy = s @ y
        if sy > 1e-300:
            if Hinv is None:
                S.append(s)
                Y.append(y)
                if len(S) > cfg.memory:
                    S.pop(0)
                    Y.pop(0)
            else:
                if it == 1:
                    Hinv *= sy / (y @ y)
                rho = 1.0 / sy
                Hy = Hinv @ y
                Hinv += (rho * rho * (y @ Hy) + rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
    return w, rec


def train_schedule(oracle: Oracle, w0, adam: AdamConfig, qn: QuasiNewtonConfig, monitor=None, log_every=0):
    """ADAM followed by the quasi-Newton phase; ``phase_boundary`` is the first BFGS record index."""
    w, rec = adam_run(oracle, w0, adam, monitor, log_every) if adam.epochs > 0 else (np.array(w0, float), TrainRecord())
    if rec.stop_reason.startswith("non-finite"):
        return w, rec
    boundary = len(rec.loss)
    if qn.max_iters > 0:
        if rec.loss:
            # the ADAM end point is the BFGS start point; do not log it twice
            rec.loss.pop()
            rec.phase.pop()
            rec.errors = [e for e in rec.errors if e[0] < len(rec.loss)]
            boundary = len(rec.loss)
        w, qrec = quasi_newton_run(oracle, w, qn, monitor, log_every)
        rec.extend(qrec)
    rec.phase_boundary = boundary
    return w, rec
