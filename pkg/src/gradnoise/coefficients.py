"""Noise and flux coefficients and the Ito-form coefficients derived from them.

Points are passed as a tuple ``x = (x_1, ..., x_d)`` of arrays broadcastable
with ``r``.  Coefficient arrays carry the component index first:
``sigma`` has shape ``(d, K, *shape)``, ``a`` has ``(d, d, *shape)`` and
``b``, ``f`` have ``(d, *shape)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

__all__ = [
    "CoefficientEvaluationError",
    "CoefficientSet",
    "SeparableCoefficients",
    "TrigMode",
    "TrigField",
    "Profile",
    "PolynomialFlux",
    "ZeroFlux",
    "ItoCoefficients",
    "GridEvaluator",
    "SeparableGridEvaluator",
    "compute_a",
    "compute_b",
    "compute_f",
    "check_assumption_sigma",
    "derivative_consistency",
    "separable",
]


class CoefficientEvaluationError(FloatingPointError):
    pass


def _unit(d: int, l: int) -> tuple:
    return tuple(1 if j == l else 0 for j in range(d))


def _add(alpha: tuple, beta: tuple) -> tuple:
    return tuple(a + b for a, b in zip(alpha, beta))


def _bshape(x, r):
    return np.broadcast_shapes(np.shape(r), *[np.shape(c) for c in x])


class CoefficientSet:
    """Abstract noise/flux data on ``T^d x R``.

    Subclasses provide mixed partial derivatives through
    :meth:`sigma_deriv` and :meth:`G_deriv`; ``alpha`` is the multi-index of
    ``x``-derivatives and ``p`` the order in ``r``.
    """

    dim: int
    modes: int
    bounds: dict

    def sigma_deriv(self, x, r, alpha: tuple, p: int) -> np.ndarray:
        raise NotImplementedError

    def G_deriv(self, x, r, alpha: tuple, p: int) -> np.ndarray:
        raise NotImplementedError

    # named views
    def sigma(self, x, r):
        return self.sigma_deriv(x, r, (0,) * self.dim, 0)

    def sigma_r(self, x, r):
        return self.sigma_deriv(x, r, (0,) * self.dim, 1)

    def sigma_rr(self, x, r):
        return self.sigma_deriv(x, r, (0,) * self.dim, 2)

    def sigma_x(self, x, r, l: int):
        return self.sigma_deriv(x, r, _unit(self.dim, l), 0)

    def sigma_rx(self, x, r, l: int):
        return self.sigma_deriv(x, r, _unit(self.dim, l), 1)

    def G(self, x, r):
        return self.G_deriv(x, r, (0,) * self.dim, 0)

    def G_r(self, x, r):
        return self.G_deriv(x, r, (0,) * self.dim, 1)

    def G_x(self, x, r, l: int):
        return self.G_deriv(x, r, _unit(self.dim, l), 0)

    def G_rx(self, x, r, l: int):
        return self.G_deriv(x, r, _unit(self.dim, l), 1)

    def on_grid(self, x):
        """Evaluator with ``x`` frozen at grid points (see :class:`GridEvaluator`)."""
        return GridEvaluator(self, x)


# ---------------------------------------------------------------------------
# separable building blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrigMode:
    """``amp * cos(2 pi kappa . x + phase)``; ``kappa`` need not be an integer vector
    (non-integer wave numbers are not periodic and are meant for pointwise use)."""

    amp: float
    kappa: tuple
    phase: float = 0.0

    def deriv(self, x, alpha: tuple) -> np.ndarray:
        theta = self.phase + 2.0 * np.pi * sum(k * xi for k, xi in zip(self.kappa, x))
        order = sum(alpha)
        scale = self.amp * (2.0 * np.pi) ** order
        for k, a in zip(self.kappa, alpha):
            scale *= k**a
        return scale * np.cos(theta + order * np.pi / 2)


@dataclass(frozen=True)
class TrigField:
    """Finite sum of :class:`TrigMode` terms; the empty sum is zero."""

    terms: tuple = ()

    def deriv(self, x, alpha: tuple) -> np.ndarray:
        out = np.zeros(np.broadcast_shapes(*[np.shape(c) for c in x]))
        for t in self.terms:
            out = out + t.deriv(x, alpha)
        return out

    @classmethod
    def const(cls, c: float, d: int = 1) -> "TrigField":
        return cls((TrigMode(c, (0.0,) * d),)) if c else cls()


class Profile:
    """Scalar ``g(r)`` with derivatives up to order 3."""

    def __init__(self, kind: str, scale: float = 1.0):
        if kind not in ("sqrt", "linear", "square", "one"):
            raise KeyError(f"unknown profile {kind!r}")
        self.kind = kind
        self.scale = float(scale)

    def __repr__(self):
        return f"Profile({self.kind!r}, {self.scale})"

    def __call__(self, r, p: int = 0) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        k = self.kind
        if p > 3:
            raise ValueError("profile derivatives available up to order 3")
        if k == "sqrt":
            if p == 0:
                out = np.sqrt(1.0 + r * r)
            elif p == 1:
                out = r / np.sqrt(1.0 + r * r)
            else:
                q = 1.0 / (1.0 + r * r)
                out = q * np.sqrt(q) if p == 2 else -3.0 * r * q * q * np.sqrt(q)
        elif k == "linear":
            out = r if p == 0 else (np.ones_like(r) if p == 1 else np.zeros_like(r))
        elif k == "square":
            out = (r * r, 2.0 * r, np.full_like(r, 2.0))[p] if p <= 2 else np.zeros_like(r)
        else:
            out = np.ones_like(r) if p == 0 else np.zeros_like(r)
        return out if self.scale == 1.0 else self.scale * out


class ZeroFlux:
    def __call__(self, i, x, r, alpha, p):
        return np.zeros(_bshape(x, r))


@dataclass(frozen=True)
class PolynomialFlux:
    """``x``-independent flux ``G^i(r) = sum_q coeffs[i][q] r^q``."""

    coeffs: tuple

    def __call__(self, i, x, r, alpha, p):
        shape = _bshape(x, r)
        if any(alpha):
            return np.zeros(shape)
        poly = np.polynomial.Polynomial(self.coeffs[i]).deriv(p)
        return np.broadcast_to(poly(np.asarray(r, dtype=float)), shape).copy()


class SeparableCoefficients(CoefficientSet):
    """``sigma^{ik}(x, r) = h^{ik}(x) g(r)`` with trigonometric ``h``.

    ``h`` is a ``d x K`` nested sequence of :class:`TrigField`.
    """

    def __init__(self, h, profile: Profile, flux=None, bounds: dict | None = None):
        self.h = tuple(tuple(row) for row in h)
        self.dim = len(self.h)
        self.modes = len(self.h[0]) if self.h else 0
        if any(len(row) != self.modes for row in self.h):
            raise ValueError("h must be a d x K table")
        self.profile = profile
        self.flux = ZeroFlux() if flux is None else flux
        self.bounds = dict(bounds or {})

    def h_deriv(self, x, alpha: tuple) -> np.ndarray:
        """``d^alpha h`` with shape ``(d, K, *xshape)``."""
        xs = np.broadcast_shapes(*[np.shape(c) for c in x])
        out = np.zeros((self.dim, self.modes) + xs)
        for i, k in product(range(self.dim), range(self.modes)):
            out[i, k] = self.h[i][k].deriv(x, alpha)
        return out

    def sigma_deriv(self, x, r, alpha, p):
        shape = _bshape(x, r)
        H = self.h_deriv(tuple(np.broadcast_to(c, shape) for c in x), alpha)
        return H * self.profile(r, p)

    def G_deriv(self, x, r, alpha, p):
        return np.stack([self.flux(i, x, r, alpha, p) for i in range(self.dim)])

    def x_independent(self) -> bool:
        return all(all(k == 0 for t in f.terms for k in t.kappa) for row in self.h for f in row)

    def on_grid(self, x):
        return SeparableGridEvaluator(self, x)


def separable(sigma_amp, kappa=1.0, profile="sqrt", modes: int = 1, phase=0.0, flux=None, bounds=None, d: int = 1):
    """Single-row helper: ``sigma^{1k} = amp_k cos(2 pi kappa_k x + phase_k) g(r)`` in 1D,
    or diagonal ``sigma^{ii}`` in 2D with the same ``x_i``-wave."""
    amps = np.broadcast_to(np.atleast_1d(np.asarray(sigma_amp, dtype=float)), (modes,))
    kaps = np.broadcast_to(np.atleast_1d(np.asarray(kappa, dtype=float)), (modes,))
    phs = np.broadcast_to(np.atleast_1d(np.asarray(phase, dtype=float)), (modes,))
    h = []
    for i in range(d):
        row = []
        for k in range(modes):
            kv = tuple(float(kaps[k]) if j == i else 0.0 for j in range(d))
            row.append(TrigField((TrigMode(float(amps[k]), kv, float(phs[k])),)))
        h.append(row)
    return SeparableCoefficients(h, Profile(profile), flux, bounds)


# ---------------------------------------------------------------------------
# Ito coefficients
# ---------------------------------------------------------------------------


def _require_finite(arr: np.ndarray, what: str, x, r, has_k: bool = True):
    if np.all(np.isfinite(arr)):
        return arr
    idx = np.argwhere(~np.isfinite(arr))[0]
    i = int(idx[0])
    k = int(idx[1]) if has_k and arr.ndim > 1 else None
    rest = tuple(idx[2:] if has_k else idx[1:])
    rb = np.broadcast_to(r, arr.shape[2 if has_k else 1:])
    xb = [float(np.broadcast_to(c, rb.shape)[rest]) for c in x]
    raise CoefficientEvaluationError(f"non-finite {what} at (i={i}, k={k}, x={xb}, r={float(rb[rest])})")


class ItoCoefficients:
    """``a^{ij}``, ``b^i``, ``f^i`` and the derivatives used by the entropy balance."""

    def __init__(self, coeffs: CoefficientSet):
        self.c = coeffs
        self.d = coeffs.dim

    def _S(self, x, r, alpha, p):
        return _require_finite(self.c.sigma_deriv(x, r, tuple(alpha), p), f"d^{alpha} d_r^{p} sigma", x, r)

    def _D(self, x, r, beta, p):
        """``d^beta d_r^p sum_j sigma^{jk}_{x_j}`` with shape ``(K, *shape)``."""
        d = self.d
        return sum(self._S(x, r, _add(beta, _unit(d, j)), p)[j] for j in range(d))

    def a(self, x, r):
        Sr = self._S(x, r, (0,) * self.d, 1)
        return 0.5 * np.einsum("ik...,jk...->ij...", Sr, Sr)

    def b_deriv(self, x, r, alpha=None, p: int = 0):
        """``d^alpha d_r^p b^i`` (``|alpha| <= 1``, ``p <= 1``), shape ``(d, *shape)``."""
        d = self.d
        alpha = (0,) * d if alpha is None else tuple(alpha)
        zero = (0,) * d
        parts_x = [(zero, zero)] if not any(alpha) else [(alpha, zero), (zero, alpha)]
        parts_r = [(0, 0)] if p == 0 else [(1, 0), (0, 1)]
        total = 0.0
        for (ax, dx), (pr, dr) in product(parts_x, parts_r):
            S = self._S(x, r, ax, 1 + pr)
            D = self._D(x, r, dx, dr)
            total = total + np.einsum("ik...,k...->i...", S, D)
        return np.broadcast_to(total, (d,) + _bshape(x, r)).copy()

    def b(self, x, r):
        return self.b_deriv(x, r)

    def f(self, x, r):
        return self.c.G(x, r) - 0.5 * self.b(x, r)

    def bf(self, x, r):
        """``b + f = G + b/2``, the first-order flux of the drift."""
        return self.c.G(x, r) + 0.5 * self.b(x, r)

    def f_r(self, x, r):
        return self.c.G_r(x, r) - 0.5 * self.b_deriv(x, r, p=1)

    def div_a(self, x, r):
        """``sum_j d_{x_j} a^{ij}``, shape ``(d, *shape)``."""
        d = self.d
        Sr = self._S(x, r, (0,) * d, 1)
        out = 0.0
        for j in range(d):
            Srx = self._S(x, r, _unit(d, j), 1)
            out = out + 0.5 * (np.einsum("ik...,k...->i...", Srx, Sr[j]) + np.einsum("ik...,k...->i...", Sr, Srx[j]))
        return np.broadcast_to(out, (d,) + _bshape(x, r)).copy()

    def div_f(self, x, r):
        """``sum_i d_{x_i} f^i``."""
        d = self.d
        return sum(self.c.G_x(x, r, i)[i] - 0.5 * self.b_deriv(x, r, _unit(d, i))[i] for i in range(d))

    def div_f_r(self, x, r):
        """``sum_i d_{x_i} d_r f^i``."""
        d = self.d
        return sum(self.c.G_rx(x, r, i)[i] - 0.5 * self.b_deriv(x, r, _unit(d, i), p=1)[i] for i in range(d))

    def div_sigma(self, x, r):
        """``sum_i sigma^{ik}_{x_i}``, shape ``(K, *shape)``."""
        return self._D(x, r, (0,) * self.d, 0)

    def div_sigma_r(self, x, r):
        """``sum_i sigma^{ik}_{r x_i}``."""
        return self._D(x, r, (0,) * self.d, 1)


def compute_a(coeffs: CoefficientSet, x, r) -> np.ndarray:
    """``a^{ij} = 1/2 sum_k sigma^{ik}_r sigma^{jk}_r``."""
    return ItoCoefficients(coeffs).a(x, r)


def compute_b(coeffs: CoefficientSet, x, r) -> np.ndarray:
    """``b^i = sum_k sigma^{ik}_r sum_j sigma^{jk}_{x_j}``."""
    return ItoCoefficients(coeffs).b(x, r)


def compute_f(coeffs: CoefficientSet, x, r) -> np.ndarray:
    """``f^i = G^i - b^i / 2``."""
    return ItoCoefficients(coeffs).f(x, r)


# ---------------------------------------------------------------------------
# grid evaluators used by the solver
# ---------------------------------------------------------------------------


class GridEvaluator:
    """Coefficients with ``x`` frozen on grid points; ``u`` may carry leading batch axes."""

    def __init__(self, coeffs: CoefficientSet, x):
        self.c = coeffs
        self.ito = ItoCoefficients(coeffs)
        self.x = tuple(np.asarray(c, dtype=float) for c in x)
        self.d = coeffs.dim
        self.modes = coeffs.modes

    def sigma(self, u):
        return self.c.sigma(self.x, u)

    def a(self, u):
        return self.ito.a(self.x, u)

    def bf(self, u):
        return self.ito.bf(self.x, u)

    def evaluate(self, u):
        """``(sigma, a, b + f)`` at ``u``."""
        return self.sigma(u), self.a(u), self.bf(u)

    def a_sup(self, R: float, samples: int = 201) -> float:
        """Sampled sup over the grid and ``|r| <= R`` of the spectral norm of ``a``."""
        best = 0.0
        for r in np.linspace(-R, R, samples):
            A = self.a(np.full(self.x[0].shape, r))
            A = np.moveaxis(A.reshape(self.d, self.d, -1), -1, 0)
            best = max(best, float(np.max(np.linalg.norm(A, 2, axis=(1, 2)))))
        return best


class SeparableGridEvaluator(GridEvaluator):
    """Fast path: every coefficient is an ``x``-field times a profile of ``u``."""

    def __init__(self, coeffs: SeparableCoefficients, x):
        super().__init__(coeffs, x)
        d = self.d
        zero = (0,) * d
        self.H = coeffs.h_deriv(self.x, zero)
        self.Hx = [coeffs.h_deriv(self.x, _unit(d, l)) for l in range(d)]
        # D^k = sum_j h^{jk}_{x_j}
        self.D = sum(self.Hx[j][j] for j in range(d)) if self.modes else np.zeros((0,) + self.x[0].shape)
        self.A = 0.5 * np.einsum("ik...,jk...->ij...", self.H, self.H)
        self.B = np.einsum("ik...,k...->i...", self.H, self.D)
        self.g = coeffs.profile
        self.flux = coeffs.flux
        self._zero_G = isinstance(coeffs.flux, ZeroFlux)
        self._A_norm = 0.0
        if self.modes:
            Am = np.moveaxis(self.A.reshape(d, d, -1), -1, 0)
            self._A_norm = float(np.max(np.linalg.norm(Am, 2, axis=(1, 2))))

    def sigma(self, u):
        return self._bc(self.H, u) * self.g(u)

    def _bc(self, field, u):
        """Insert batch axes so an ``x``-field broadcasts against ``u``."""
        lead = field.ndim - self.d
        return field.reshape(field.shape[:lead] + (1,) * (np.ndim(u) - self.d) + field.shape[lead:])

    def a(self, u):
        return self._bc(self.A, u) * self.g(u, 1) ** 2

    def bf(self, u):
        gg = self.g(u) * self.g(u, 1)
        out = 0.5 * self._bc(self.B, u) * gg
        if not self._zero_G:
            out = out + self.c.G(self.x, u)
        return out

    def evaluate(self, u):
        g0 = self.g(u)
        g1 = u / g0 if self.g.kind == "sqrt" and self.g.scale == 1.0 else self.g(u, 1)
        sig = self._bc(self.H, u) * g0
        a = self._bc(self.A, u) * (g1 * g1)
        bf = 0.5 * self._bc(self.B, u) * (g0 * g1)
        if not self._zero_G:
            bf = bf + self.c.G(self.x, u)
        return sig, a, bf

    def a_sup(self, R: float, samples: int = 2001) -> float:
        r = np.linspace(-R, R, samples)
        return self._A_norm * float(np.max(self.g(r, 1) ** 2))


# ---------------------------------------------------------------------------
# sampled assumption checks
# ---------------------------------------------------------------------------


def _l2k(arr):
    """Euclidean norm over the mode axis (axis 1 of ``(d, K, ...)``)."""
    return np.sqrt(np.sum(arr * arr, axis=1))


def check_assumption_sigma(coeffs: CoefficientSet, sample_grid) -> dict:
    """Observed suprema of the regularity bounds on ``sigma`` and ``G``.

    ``sample_grid`` is ``(x, r)`` with ``x`` a tuple of coordinate arrays
    broadcastable against ``r``.  Bounded quantities are compared with the
    declared ``N0``; linear-growth quantities (divided by ``1 + |r|``) with
    ``N1`` when declared.
    """
    x, r = sample_grid
    r = np.asarray(r, dtype=float)
    d = coeffs.dim
    zero = (0,) * d
    ito = ItoCoefficients(coeffs)
    S = coeffs.sigma_deriv
    N0 = coeffs.bounds.get("N0")
    N1 = coeffs.bounds.get("N1")
    grow = 1.0 + np.abs(r)

    def sup(a):
        return float(np.max(np.abs(a))) if np.size(a) else 0.0

    # W^2_inf(T^d; l2) norm of sigma_r, uniformly in r
    w2 = _l2k(S(x, r, zero, 1))
    for l in range(d):
        w2 = w2 + _l2k(S(x, r, _unit(d, l), 1))
        for q in range(d):
            w2 = w2 + _l2k(S(x, r, _add(_unit(d, l), _unit(d, q)), 1))
    rr = _l2k(S(x, r, zero, 2))
    rx = 0.0
    for l in range(d):
        rx = np.maximum(rx, _l2k(S(x, r, _unit(d, l), 1)) + _l2k(S(x, r, _unit(d, l), 2)))
    Gr = coeffs.G_r(x, r)
    G_rx = max((sup(coeffs.G_rx(x, r, l)) for l in range(d)), default=0.0)
    b_r = ito.b_deriv(x, r, p=1)
    b_rx = max((sup(ito.b_deriv(x, r, _unit(d, l), p=1)) for l in range(d)), default=0.0)
    bounded = {
        "sigma_r_W2inf": sup(w2),
        "sigma_rr_l2": sup(rr),
        "sigma_rx_W1inf": sup(rx),
        "G_r": sup(Gr),
        "d_r_sigma_r_div_sigma": sup(b_r),
        "d_x_d_r_sigma_r_div_sigma": b_rx,
        "G_rx": G_rx,
    }
    growth = {
        "G": sup(coeffs.G(x, r) / grow),
        "sigma_r_div_sigma": sup(ito.b(x, r) / grow),
        "d_x_sigma_r_div_sigma": max((sup(ito.b_deriv(x, r, _unit(d, l)) / grow) for l in range(d)), default=0.0),
        "div_sigma_l2": sup(np.sqrt(np.sum(ito.div_sigma(x, r) ** 2, axis=0)) / grow) if coeffs.modes else 0.0,
    }
    violations = []
    if N0 is not None:
        violations += [k for k, v in bounded.items() if not v <= N0]
    if N1 is not None:
        violations += [k for k, v in growth.items() if not v <= N1]
    return {
        "bounded": bounded,
        "linear_growth": growth,
        "N0": N0,
        "N1": N1,
        "violations": violations,
        "passed": not violations,
    }


def derivative_consistency(coeffs: CoefficientSet, x, r, step: float = 1e-5) -> float:
    """Worst relative gap between ``sigma_r`` and a central difference of ``sigma``."""
    r = np.asarray(r, dtype=float)
    fd = (coeffs.sigma(x, r + step) - coeffs.sigma(x, r - step)) / (2 * step)
    an = coeffs.sigma_r(x, r)
    scale = np.maximum(np.abs(an), 1.0)
    return float(np.max(np.abs(fd - an) / scale)) if an.size else 0.0
