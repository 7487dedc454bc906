"""Discrete entropy balance along simulated paths.

For a convex entropy ``eta`` and a product test function
``phi(t, x) = vphi(t) rho(x)`` the residual

    LHS - RHS = -int int eta(u) phi_t  -  (initial term + drift terms + Ito sum)

is accumulated step by step.  Time integrals treat ``u`` as piecewise
constant on each step, so ``-int eta(u) phi_t`` becomes an Abel sum with the
exact increments of ``vphi``; drift and stochastic terms use the left point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .._tables import HermiteTable, bracket_table, cumulative_integral
from ..coefficients import ItoCoefficients, SeparableGridEvaluator, ZeroFlux

__all__ = [
    "EntropyPair",
    "QuadraticEntropy",
    "TestFunction",
    "SeparableBrackets",
    "QuadratureBrackets",
    "make_brackets",
    "EntropyObserver",
    "entropy_residual",
]


def _bump01(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    y = 2.0 * s - 1.0
    inside = np.abs(y) < 1
    out[inside] = np.exp(-1.0 / (1.0 - y[inside] ** 2))
    return out


_BUMP_MASS = integrate.quad(lambda s: float(_bump01(s)), 0.0, 1.0, epsabs=1e-14, epsrel=1e-14)[0]


class EntropyPair:
    """``eta_delta(r - shift)`` with ``eta_delta(0) = eta_delta'(0) = 0`` and
    ``eta_delta'' = rho_delta(|r|)``, ``rho_delta(s) = rho(s/delta)/delta`` a
    smooth unit-mass bump on ``(0, delta)``.

    ``eta' = sign(r) P(|r|/delta)`` and ``eta = delta Q(|r|/delta)`` with
    ``P = int rho`` and ``Q = int P`` tabulated once; beyond ``delta`` the
    entropy is ``|r| - delta/2``.
    """

    cells = 4000

    def __init__(self, delta: float, shift: float = 0.0):
        if not delta > 0:
            raise ValueError("delta must be positive")
        self.delta = float(delta)
        self.shift = float(shift)
        z = np.linspace(0.0, 1.0, self.cells + 1)
        rho = lambda s: _bump01(s) / _BUMP_MASS
        P = cumulative_integral(rho, z)
        P /= P[-1]
        self._P = HermiteTable(0.0, 1.0 / self.cells, P, rho(z))
        Q = cumulative_integral(self._P, z)
        self._Q = HermiteTable(0.0, 1.0 / self.cells, Q, P)
        self._Q1 = float(Q[-1])
        self._rho = rho

    @property
    def kinks(self) -> tuple:
        return (self.shift - self.delta, self.shift, self.shift + self.delta)

    def _z(self, r):
        y = np.asarray(r, dtype=float) - self.shift
        return y, np.abs(y) / self.delta

    def eta(self, r):
        y, z = self._z(r)
        return self.delta * np.where(z < 1, self._Q(np.minimum(z, 1.0)), self._Q1 + z - 1.0)

    def eta_prime(self, r):
        y, z = self._z(r)
        return np.sign(y) * np.where(z < 1, self._P(np.minimum(z, 1.0)), 1.0)

    def eta_double_prime(self, r):
        y, z = self._z(r)
        return self._rho(z) / self.delta


class QuadraticEntropy:
    """``eta(r) = (r - shift)^2 / 2``: smooth and convex, used for smooth-solution checks."""

    delta = None

    def __init__(self, shift: float = 0.0):
        self.shift = float(shift)
        self.kinks = ()

    def eta(self, r):
        y = np.asarray(r, dtype=float) - self.shift
        return 0.5 * y * y

    def eta_prime(self, r):
        return np.asarray(r, dtype=float) - self.shift

    def eta_double_prime(self, r):
        return np.ones_like(np.asarray(r, dtype=float))


def _smooth_step(z):
    """C-infinity step: 0 for ``z <= 0``, 1 for ``z >= 1``."""
    z = np.asarray(z, dtype=float)
    out = np.where(z >= 1, 1.0, 0.0)
    mid = (z > 0) & (z < 1)
    zm = z[mid]
    a = np.exp(-1.0 / zm)
    b = np.exp(-1.0 / (1.0 - zm))
    out[mid] = a / (a + b)
    return out


@dataclass(frozen=True)
class TestFunction:
    """``phi(t, x) = vphi(t) rho(x)`` with ``rho = 1 + c cos(2 pi (x_1 + ... + x_d))``.

    ``vphi`` equals one up to ``T - tau`` and decays smoothly to zero at ``T``.
    """

    __test__ = False  # not a pytest class

    T: float
    c: float = 0.5
    tau: float | None = None
    dim: int = 1

    def __post_init__(self):
        if not 0 <= self.c < 1:
            raise ValueError("need 0 <= c < 1 for a positive test function")

    def time(self, t):
        tau = self.T / 2 if self.tau is None else self.tau
        return _smooth_step((self.T - np.asarray(t, dtype=float)) / tau)

    def _theta(self, x):
        return 2.0 * np.pi * sum(x)

    def rho(self, x):
        return 1.0 + self.c * np.cos(self._theta(x))

    def grad(self, x):
        g = -self.c * 2.0 * np.pi * np.sin(self._theta(x))
        return np.stack([g] * self.dim)

    def hess(self, x):
        hh = -self.c * (2.0 * np.pi) ** 2 * np.cos(self._theta(x))
        return np.stack([np.stack([hh] * self.dim)] * self.dim)


def _bc(field: np.ndarray, u: np.ndarray, d: int) -> np.ndarray:
    lead = field.ndim - d
    return field.reshape(field.shape[:lead] + (1,) * (u.ndim - d) + field.shape[lead:])


class SeparableBrackets:
    """Entropy-balance integrands for separable coefficients via 1D bracket tables.

    Every bracket ``[c(x, .) eta'](u)`` factors into an ``x``-field times a
    tabulated ``[g eta'](u)`` of a scalar profile.
    """

    def __init__(self, ev: SeparableGridEvaluator, nonlinearity, entropy, R: float, step: float | None = None):
        self.ev, self.nl, self.ent = ev, nonlinearity, entropy
        self.d = ev.d
        delta = entropy.delta or 1.0
        self.step = step if step is not None else min(1e-3, delta / 64)
        c = ev.c
        d = self.d
        both = lambda l, q: tuple((j == l) + (j == q) for j in range(d))
        H, Hx = ev.H, ev.Hx
        K = ev.modes
        # second derivatives of h for the divergence of B
        Hxx = [[c.h_deriv(ev.x, both(l, q)) for q in range(d)] for l in range(d)]
        Dx = [sum(Hxx[j][l][j] for j in range(d)) if K else np.zeros_like(ev.D) for l in range(d)]
        self.A = ev.A
        self.B = ev.B
        self.D = ev.D
        self.H = H
        self.Ax = np.stack(
            [
                sum(0.5 * np.einsum("k...,k...->...", Hx[j][i], H[j]) + 0.5 * np.einsum("k...,k...->...", H[i], Hx[j][j]) for j in range(d))
                for i in range(d)
            ]
        )
        self.divB = sum(
            np.einsum("k...,k...->...", Hx[i][i], ev.D) + np.einsum("k...,k...->...", H[i], Dx[i]) for i in range(d)
        )
        self.DD = np.sum(ev.D**2, axis=0) if K else np.zeros(ev.x[0].shape)
        self.G_zero = isinstance(c.flux, ZeroFlux)
        self.g = c.profile
        self.R = 0.0
        self.ensure(R)

    def ensure(self, R: float):
        if R <= self.R:
            return
        R = max(R, 2 * self.R, 1.0)
        ep = self.ent.eta_prime
        g = self.g
        self._aa = bracket_table(lambda s: self.nl.a_frak(s) ** 2 * ep(s), R, self.step)
        self._g2 = bracket_table(lambda s: g(s, 1) ** 2 * ep(s), R, self.step)
        self._gg = bracket_table(lambda s: (g(s, 2) * g(s) + g(s, 1) ** 2) * ep(s), R, self.step)
        self._g1 = bracket_table(lambda s: g(s, 1) * ep(s), R, self.step)
        if not self.G_zero:
            c = self.ev.c
            zero = tuple(np.zeros(1) for _ in range(self.d))
            self._Gr = [
                bracket_table(lambda s, i=i: c.G_deriv(zero, s, (0,) * self.d, 1)[i] * ep(s), R, self.step)
                for i in range(self.d)
            ]
        self.R = R

    def pieces(self, u: np.ndarray) -> dict:
        d = self.d
        self.ensure(float(np.max(np.abs(u))))
        ep = self.ent.eta_prime(u)
        epp = self.ent.eta_double_prime(u)
        g0 = self.g(u)
        g1 = self.g(u, 1)
        gg1 = g0 * g1
        T_g2 = self._g2(u)
        T_gg = self._gg(u)
        T_g1 = self._g1(u)
        bc = lambda f: _bc(f, u, d)
        drift1 = bc(self.Ax) * T_g2 + 0.5 * bc(self.B) * T_gg - ep * bc(self.B) * gg1
        if not self.G_zero:
            drift1 = drift1 - np.stack([t(u) for t in self._Gr])
        divB = bc(self.divB)
        return {
            "aa": self._aa(u),
            "a_eta": bc(self.A) * T_g2,
            "drift1": drift1,
            "zero_order": -0.5 * divB * gg1 * ep + 0.5 * divB * T_gg,
            "ito": 0.5 * epp * bc(self.DD) * g0 * g0,
            "stoch0": bc(self.D) * (ep * g0 - T_g1),
            "stoch1": bc(self.H) * T_g1,
        }


class QuadratureBrackets:
    """Same integrands for any coefficient set, by per-cell Gauss-Legendre quadrature.

    Slow; serves as the independent check of :class:`SeparableBrackets`.
    """

    def __init__(self, ev, nonlinearity, entropy, panels: int = 32, order: int = 8):
        self.ev, self.nl, self.ent = ev, nonlinearity, entropy
        self.ito = ItoCoefficients(ev.c)
        self.d = ev.d
        x, w = np.polynomial.legendre.leggauss(order)
        edges = np.linspace(0.0, 1.0, panels + 1)
        a, b = edges[:-1, None], edges[1:, None]
        self.tau = (0.5 * (b - a) * x + 0.5 * (a + b)).ravel()
        self.w = (0.5 * (b - a) * w).ravel()

    def _bracket(self, func, u):
        """``int_0^u func(s) eta'(s) ds`` per cell; ``func`` maps ``s`` (Q, *u.shape) to (..., Q, *u.shape)."""
        s = u[None] * self.tau.reshape((-1,) + (1,) * u.ndim)
        vals = func(s) * self.ent.eta_prime(s)
        w = self.w.reshape((-1,) + (1,) * u.ndim)
        return np.sum(vals * w, axis=-u.ndim - 1) * u

    def pieces(self, u: np.ndarray) -> dict:
        x = self.ev.x
        ito = self.ito
        ep = self.ent.eta_prime(u)
        epp = self.ent.eta_double_prime(u)
        xq = tuple(c for c in x)
        div_sigma = ito.div_sigma(xq, u)
        return {
            "aa": self._bracket(lambda s: self.nl.a_frak(s) ** 2, u),
            "a_eta": self._bracket_field(lambda s: ito.a(xq, s), u, 2),
            "drift1": self._bracket_field(lambda s: ito.div_a(xq, s) - ito.f_r(xq, s), u, 1) - ep * ito.b(xq, u),
            "zero_order": ep * ito.div_f(xq, u) - self._bracket(lambda s: ito.div_f_r(xq, s), u),
            "ito": 0.5 * epp * np.sum(div_sigma**2, axis=0),
            "stoch0": ep * div_sigma - self._bracket_field(lambda s: ito.div_sigma_r(xq, s), u, 1),
            "stoch1": self._bracket_field(lambda s: ito.c.sigma_r(xq, s), u, 2),
        }

    def _bracket_field(self, func, u, lead: int):
        """Bracket of a field with ``lead`` leading component axes."""
        s = u[None] * self.tau.reshape((-1,) + (1,) * u.ndim)
        vals = func(s)  # (*comp, Q, *u.shape)
        vals = vals * self.ent.eta_prime(s)
        w = self.w.reshape((-1,) + (1,) * u.ndim)
        return np.sum(vals * w, axis=lead) * u


def make_brackets(cfg, entropy, R: float):
    ev = cfg.evaluator
    if isinstance(ev, SeparableGridEvaluator):
        return SeparableBrackets(ev, cfg.nonlinearity, entropy, R)
    return QuadratureBrackets(ev, cfg.nonlinearity, entropy)


class EntropyObserver:
    """Accumulates the entropy residual of every sample while the solver runs."""

    def __init__(self, cfg, entropy, tf: TestFunction, samples: int, brackets=None, R: float = 2.0,
                 dissipation: str = "cell"):
        if dissipation not in ("cell", "face"):
            raise ValueError("dissipation must be 'cell' or 'face'")
        self.dissipation = dissipation
        self.cfg = cfg
        self.ent = entropy
        self.tf = tf
        self.brackets = make_brackets(cfg, entropy, R) if brackets is None else brackets
        x = cfg.evaluator.x
        d = cfg.dim
        self.vol = cfg.h**d
        self.rho = tf.rho(x)
        self.grad = tf.grad(x)
        self.hess = tf.hess(x)
        self.lap = sum(self.hess[l, l] for l in range(d))
        self.lhs = np.zeros(samples)
        self.det = np.zeros(samples)
        self.sto = np.zeros(samples)
        self.terms = {k: np.zeros(samples) for k in ("T1", "T2", "T3", "T4", "T5")}
        self.initial = np.zeros(samples)
        self.qv = np.zeros(samples)

    def _dissipation(self, u):
        """``eta''(u) |grad [a_n](u)|^2`` per cell.

        ``"cell"``: ``eta''(u_i)`` times the average of squared face differences
        of ``[a_n](u)``.  ``"face"``: average over faces of the product of the
        face differences of ``eta'(u)`` and ``Phi_n(u)``, the form in which the
        flux scheme dissipates entropy.
        """
        d, h = self.cfg.dim, self.cfg.h
        nl = self.cfg.nonlinearity
        if self.dissipation == "face":
            E, P = self.ent.eta_prime(u), nl.phi(u)
        else:
            E = P = nl.bracket_a(u)
        out = 0.0
        for l in range(d):
            ax = u.ndim - d + l
            fw = (np.roll(E, -1, ax) - E) * (np.roll(P, -1, ax) - P) / (h * h)
            out = out + 0.5 * (fw + np.roll(fw, 1, ax))
        return out if self.dissipation == "face" else self.ent.eta_double_prime(u) * out

    def densities(self, u):
        """Per-sample drift density and stochastic densities ``(S,)``, ``(S, K)``."""
        d = self.cfg.dim
        p = self.brackets.pieces(u)
        ax = tuple(range(1, u.ndim))
        integ = lambda f: self.vol * np.sum(f, axis=ax)
        bc = lambda f: _bc(f, u, d)
        t1 = integ(p["aa"] * bc(self.lap))
        t2 = integ(sum(p["a_eta"][i, j] * bc(self.hess[i, j]) for i in range(d) for j in range(d)))
        t3 = integ(sum(p["drift1"][i] * bc(self.grad[i]) for i in range(d)))
        t4 = integ(p["zero_order"] * bc(self.rho))
        t5 = integ((p["ito"] - self._dissipation(u)) * bc(self.rho))
        z = p["stoch0"] * bc(self.rho) - sum(p["stoch1"][i] * bc(self.grad[i]) for i in range(d))
        zk = self.vol * np.sum(z, axis=tuple(range(2, z.ndim))).T if z.shape[0] else np.zeros((u.shape[0], 0))
        return (t1, t2, t3, t4, t5), zk

    def set_initial(self, u0, xi):
        """Mismatch ``int (eta(u(0)) - eta(xi)) phi(0)`` when ``u(0) = xi_n != xi``."""
        ax = tuple(range(1, u0.ndim))
        diff = self.ent.eta(u0) - self.ent.eta(np.broadcast_to(xi, u0.shape))
        self.initial = self.vol * np.sum(diff * _bc(self.rho, u0, self.cfg.dim), axis=ax) * float(self.tf.time(0.0))

    def update(self, n, t, u_old, u_new, dW):
        dt = self.cfg.dt
        v0 = float(self.tf.time(t))
        v1 = float(self.tf.time(t + dt))
        if v0 == 0.0 and v1 == 0.0:
            return
        ax = tuple(range(1, u_old.ndim))
        rho = _bc(self.rho, u_old, self.cfg.dim)
        self.lhs += v1 * self.vol * np.sum((self.ent.eta(u_new) - self.ent.eta(u_old)) * rho, axis=ax)
        terms, zk = self.densities(u_old)
        for name, val in zip(("T1", "T2", "T3", "T4", "T5"), terms):
            self.terms[name] += v0 * dt * val
        self.det += v0 * dt * sum(terms)
        if zk.shape[1]:
            self.sto += v0 * np.sum(zk * dW, axis=1)
            self.qv += v1 * self._qv_increment(u_old, dW, rho, ax)

    def _qv_increment(self, u, dW, rho, ax):
        """Centred quadratic variation ``1/2 eta'' ((dN)^2 - E_n (dN)^2)`` of the noise update ``dN``.

        A martingale increment with zero conditional mean: subtracting its sum
        leaves the expected residual unchanged while removing most of the
        pathwise scatter from the Ito correction.
        """
        d = self.cfg.dim
        sig = self.cfg.evaluator.sigma(u)  # (d, K, S, *grid)
        q = 0.0
        for l in range(d):
            ax_l = u.ndim - d + l + 1
            s_face = 0.5 * (sig[l] + np.roll(sig[l], -1, ax_l))
            q = q + (s_face - np.roll(s_face, 1, ax_l)) / self.cfg.h
        dWb = dW.T.reshape(dW.shape[::-1] + (1,) * d)
        dN = np.sum(q * dWb, axis=0)
        centred = dN * dN - self.cfg.dt * np.sum(q * q, axis=0)
        return self.vol * np.sum(0.5 * self.ent.eta_double_prime(u) * rho * centred, axis=ax)

    def result(self) -> dict:
        return {
            "residual": self.lhs + self.initial - self.det - self.sto,
            "residual_cv": self.lhs + self.initial - self.det - self.sto - self.qv,
            "lhs": self.lhs + self.initial,
            "drift": self.det,
            "stochastic": self.sto,
            **{k: v.copy() for k, v in self.terms.items()},
        }


def entropy_residual(traj, pair, tf: TestFunction, path, xi, cfg, brackets=None):
    """Residual ``LHS - RHS`` of the entropy balance on a dense trajectory.

    ``traj`` must hold a snapshot at every step.  Returns a float for a single
    trajectory or an array over samples for a batch.
    """
    if not traj.dense or traj.snapshot_steps[-1] != cfg.steps:
        raise ValueError("entropy residual needs a snapshot at every time step")
    snaps = traj.snapshots if traj.batched else traj.snapshots[:, None]
    S = snaps.shape[1]
    R = float(np.max(np.abs(snaps))) + 1.0
    obs = EntropyObserver(cfg, pair, tf, S, brackets, R=R)
    obs.set_initial(snaps[0], np.asarray(xi, dtype=float) if not hasattr(xi, "values") else xi.values)
    paths = path if isinstance(path, (list, tuple)) else [path] * S
    K = cfg.evaluator.modes
    steps = cfg.steps
    dW = np.stack([p.block(0, steps) for p in paths], axis=1) if K else np.zeros((steps, S, 0))
    for n in range(steps):
        obs.update(n, n * cfg.dt, snaps[n], snaps[n + 1], dW[n])
    res = obs.result()["residual"]
    return float(res[0]) if not traj.batched else res
