"""Diffusion nonlinearities, their structural checks and regularizations.

A family carries ``Phi`` and ``a = sqrt(Phi')``.  ``regularize`` produces the
non-degenerate, Lipschitz ``Phi_n`` used by the solver; ``mcf_regularize``
builds the explicit curve-shortening family whose limit is ``arctan``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable

import numpy as np
from scipy import integrate

from ._tables import HermiteTable, cumulative_integral

__all__ = [
    "NonlinearityFamily",
    "RegularizedNonlinearity",
    "MollifiedRegularization",
    "McfRegularization",
    "AssumptionReport",
    "Check",
    "QuadratureError",
    "RegularizationError",
    "make_power_law",
    "make_arctan",
    "make_linear",
    "make_family",
    "bracket",
    "check_assumption_A",
    "regularize",
    "mcf_regularize",
    "mcf_cutoff",
    "mcf_b",
    "r_lambda",
]


class QuadratureError(RuntimeError):
    pass


class RegularizationError(ValueError):
    pass


@dataclass(frozen=True)
class NonlinearityFamily:
    name: str
    m: float
    K: float
    phi: Callable = field(repr=False)
    a_frak: Callable = field(repr=False)
    a_frak_prime: Callable = field(repr=False)


def _pl_phi(r, m):
    r = np.asarray(r, dtype=float)
    return np.abs(r) ** (m - 1) * r


def _pl_a(r, m):
    return math.sqrt(m) * np.abs(np.asarray(r, dtype=float)) ** ((m - 1) / 2)


def _pl_a_prime(r, m):
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        return math.sqrt(m) * (m - 1) / 2 * np.abs(r) ** ((m - 3) / 2) * np.sign(r)


def _atan_a(r):
    r = np.asarray(r, dtype=float)
    return 1.0 / np.sqrt(1.0 + r * r)


def _atan_a_prime(r):
    r = np.asarray(r, dtype=float)
    return -r * (1.0 + r * r) ** -1.5


def _identity(r):
    return np.asarray(r, dtype=float) * 1.0


def _one(r):
    return np.ones_like(np.asarray(r, dtype=float))


def _zero(r):
    return np.zeros_like(np.asarray(r, dtype=float))


def make_power_law(m: float, K: float = 1.0) -> NonlinearityFamily:
    """``Phi(r) = |r|^(m-1) r`` (porous medium), slow diffusion ``m > 1``."""
    if not m > 1:
        raise ValueError(f"power law needs m > 1, got {m}")
    m = float(m)
    return NonlinearityFamily(
        f"power_law(m={m:g},K={K:g})",
        m,
        float(K),
        partial(_pl_phi, m=m),
        partial(_pl_a, m=m),
        partial(_pl_a_prime, m=m),
    )


def make_arctan(K: float = 1.0) -> NonlinearityFamily:
    """``Phi = arctan``; the graph mean curvature flow nonlinearity (exponent 3)."""
    return NonlinearityFamily("arctan", 3.0, float(K), np.arctan, _atan_a, _atan_a_prime)


def make_linear(K: float = 1.0) -> NonlinearityFamily:
    """``Phi(r) = r`` (heat equation), exponent 1."""
    return NonlinearityFamily("linear", 1.0, float(K), _identity, _one, _zero)


def make_family(name: str, **params) -> NonlinearityFamily:
    if name == "power_law":
        return make_power_law(params.get("m", 2.0), params.get("K", 1.0))
    if name == "arctan":
        return make_arctan(params.get("K", 1.0))
    if name == "linear":
        return make_linear(params.get("K", 1.0))
    raise KeyError(f"unknown nonlinearity family {name!r}")


def bracket(g: Callable[[float], float], r: float, tol: float = 1e-10) -> float:
    """``[g](r) = int_0^r g(s) ds`` by adaptive quadrature."""
    if r == 0:
        return 0.0
    val, err, *rest = integrate.quad(g, 0.0, r, epsabs=tol, epsrel=tol, limit=400, full_output=1)
    if rest and len(rest) > 1 and err > tol:
        raise QuadratureError(f"quadrature of [g]({r}) did not converge: error estimate {err:.3e}")
    return float(val)


# ---------------------------------------------------------------------------
# structural predicates
# ---------------------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    worst_margin: float
    where: object = None


@dataclass
class AssumptionReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def violations(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [
                {"name": c.name, "passed": c.passed, "worst_margin": c.worst_margin, "where": c.where}
                for c in self.checks
            ],
        }


def _brackets_on(a_frak, pts: np.ndarray) -> np.ndarray:
    """[a](pts) by adaptive quadrature between consecutive sorted points."""
    order = np.argsort(pts)
    srt = pts[order]
    zero = np.searchsorted(srt, 0.0)
    vals = np.empty_like(srt)
    f = lambda s: float(a_frak(s))
    acc, prev = 0.0, 0.0
    for i in range(zero, srt.size):
        acc += integrate.quad(f, prev, srt[i], epsabs=1e-12, epsrel=1e-12, limit=200)[0]
        prev = srt[i]
        vals[i] = acc
    acc, prev = 0.0, 0.0
    for i in range(zero - 1, -1, -1):
        acc += integrate.quad(f, prev, srt[i], epsabs=1e-12, epsrel=1e-12, limit=200)[0]
        prev = srt[i]
        vals[i] = acc
    out = np.empty_like(vals)
    out[order] = vals
    return out


def check_assumption_A(
    fam: NonlinearityFamily,
    grid,
    K: float | None = None,
    tol: float = 1e-12,
    brackets: Callable | None = None,
) -> AssumptionReport:
    """Sampled test of the structural bounds on ``a = sqrt(Phi')``.

    Margins are ``rhs - lhs`` (non-negative means satisfied).  ``grid`` should
    straddle ``+-1``; the pairwise lower bound on ``[a]`` uses every pair.
    ``[a]`` comes from adaptive quadrature unless a vectorized ``brackets``
    evaluator is supplied.
    """
    K = fam.K if K is None else K
    m = fam.m
    r = np.unique(np.asarray(grid, dtype=float))
    checks = []

    a0 = float(abs(fam.a_frak(np.array(0.0))))
    checks.append(Check("a(0) <= K", K - a0 >= -tol, K - a0, 0.0))

    pos = r[r > 0]
    lhs = np.abs(fam.a_frak_prime(pos))
    rhs = K * pos ** ((m - 3) / 2)
    marg = rhs - lhs
    i = int(np.argmin(marg))
    checks.append(Check("|a'(r)| <= K r^((m-3)/2)", bool(marg[i] >= -tol * max(1.0, rhs[i])), float(marg[i]), float(pos[i])))

    big = r[np.abs(r) >= 1]
    if big.size:
        marg = K * fam.a_frak(big) - 1.0
        i = int(np.argmin(marg))
        checks.append(Check("K a(r) >= 1 for |r| >= 1", bool(marg[i] >= -tol), float(marg[i]), float(big[i])))

    br = _brackets_on(fam.a_frak, r) if brackets is None else np.asarray(brackets(r), dtype=float)
    ii, jj = np.triu_indices(r.size, k=1)
    diff = np.abs(r[ii] - r[jj])
    outer = np.maximum(np.abs(r[ii]), np.abs(r[jj])) >= 1
    rhs = np.where(outer, diff, diff ** ((m + 1) / 2))
    lhs = K * np.abs(br[ii] - br[jj])
    marg = lhs - rhs
    i = int(np.argmin(marg))
    checks.append(
        Check(
            "K|[a](r)-[a](z)| >= two-regime modulus",
            bool(marg[i] >= -tol * max(1.0, rhs[i])),
            float(marg[i]),
            [float(r[ii[i]]), float(r[jj[i]])],
        )
    )
    return AssumptionReport(checks)


# ---------------------------------------------------------------------------
# regularized families
# ---------------------------------------------------------------------------


class RegularizedNonlinearity:
    """Common surface of ``Phi_n``: values, ``a_n``, ``[a_n]`` and derivative bounds."""

    n: float
    m: float
    target: NonlinearityFamily | None

    def phi(self, r):
        raise NotImplementedError

    def a_frak(self, r):
        raise NotImplementedError

    def a_frak_prime(self, r):
        raise NotImplementedError

    def bracket_a(self, r):
        """``[a_n](r)``."""
        raise NotImplementedError

    def phi_prime_sup(self, R: float) -> float:
        """Upper bound of ``Phi_n' = a_n^2`` over ``|r| <= R``."""
        raise NotImplementedError

    def family(self, K: float) -> NonlinearityFamily:
        return NonlinearityFamily(f"{self.name}", self.m, K, self.phi, self.a_frak, self.a_frak_prime)

    @property
    def name(self) -> str:
        return type(self).__name__


def _bump(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def _bump_prime(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    si = s[inside]
    out[inside] = np.exp(-1.0 / (1.0 - si**2)) * (-2.0 * si) / (1.0 - si**2) ** 2
    return out


class MollifiedRegularization(RegularizedNonlinearity):
    """``a_n = rho_w * max(a(clip(|r|, 0, n)), 2/n)`` with ``w = 1/n^2``; ``Phi_n = [a_n^2]``.

    Mollification keeps the floor ``2/n`` and makes ``a_n`` smooth; beyond
    ``|r| = n + w`` the function is constant, so ``Phi_n`` is linear there.
    """

    def __init__(self, target: NonlinearityFamily, n: int, step: float = 1e-3, nodes: int = 48):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.target = target
        self.n = int(n)
        self.m = target.m
        self.floor = 2.0 / self.n
        self.width = 1.0 / self.n**2
        x, w = np.polynomial.legendre.leggauss(nodes)
        psi = _bump(x) * w
        norm = psi.sum()
        self._offsets = x * self.width
        self._weights = psi / norm
        self._dweights = _bump_prime(x) * w / norm / self.width
        self.R_tab = self.n + self.width
        J = int(np.ceil(self.R_tab / step))
        self.step = self.R_tab / J
        nodes_r = np.arange(J + 1) * self.step
        a_nodes = self.a_frak(nodes_r)
        sq = cumulative_integral(lambda s: self.a_frak(s) ** 2, nodes_r)
        lin = cumulative_integral(self.a_frak, nodes_r)
        self._phi = HermiteTable(0.0, self.step, sq, a_nodes**2)
        self._br = HermiteTable(0.0, self.step, lin, a_nodes)
        self.a_inf = float(a_nodes[-1])
        self._phi_end = float(sq[-1])
        self._br_end = float(lin[-1])
        # sup of a_n^2 over [0, r_j + step]; a_n^2 between nodes is bounded by neighbours
        sq_nodes = a_nodes**2
        self._sup_sq = np.maximum.accumulate(np.maximum(sq_nodes, np.append(sq_nodes[1:], sq_nodes[-1])))

    @property
    def name(self) -> str:
        return f"{self.target.name}_n{self.n}"

    def _clamped(self, r):
        a = self.target.a_frak(np.minimum(np.abs(r), self.n))
        return np.maximum(a, self.floor)

    def a_frak(self, r):
        r = np.asarray(r, dtype=float)
        acc = np.zeros_like(r)
        for off, wt in zip(self._offsets, self._weights):
            acc += wt * self._clamped(r - off)
        # mollification preserves the floor; guard against rounding below it
        return np.maximum(acc, self.floor)

    def a_frak_prime(self, r):
        r = np.asarray(r, dtype=float)
        acc = np.zeros_like(r)
        for off, wt in zip(self._offsets, self._dweights):
            # d/dr int rho(s) A(r - s) ds = int rho'(s) A(r - s) ds
            acc += wt * self._clamped(r - off)
        return acc

    def _odd(self, table, end, slope, r):
        r = np.asarray(r, dtype=float)
        a = np.abs(r)
        inside = table(np.minimum(a, self.R_tab))
        out = np.where(a <= self.R_tab, inside, end + slope * (a - self.R_tab))
        return np.sign(r) * out

    def phi(self, r):
        return self._odd(self._phi, self._phi_end, self.a_inf**2, r)

    def bracket_a(self, r):
        return self._odd(self._br, self._br_end, self.a_inf, r)

    def phi_prime_sup(self, R: float) -> float:
        j = int(min(np.ceil(abs(R) / self.step), self._sup_sq.size - 1))
        return float(self._sup_sq[j])


def regularize(fam: NonlinearityFamily, n: int, check: bool = True, step: float = 1e-3) -> MollifiedRegularization:
    """Non-degenerate ``Phi_n`` with ``a_n >= 2/n`` and ``sup_{|r|<=n}|a - a_n| <= 4/n``.

    With ``check`` the construction is verified on a sample grid, including the
    structural bounds with constant ``3K``; a violated bound raises.
    """
    reg = MollifiedRegularization(fam, n, step=step)
    if not check:
        return reg
    problems = []
    r = np.concatenate([np.linspace(-(n + 1), n + 1, 4001), np.linspace(-2.0 / n, 2.0 / n, 401)])
    an = reg.a_frak(r)
    if an.min() < 2.0 / n:
        problems.append(f"min a_n = {an.min():.6g} < 2/n")
    inner = np.abs(r) <= n
    gap = np.max(np.abs(fam.a_frak(r[inner]) - an[inner]))
    if gap > 4.0 / n:
        problems.append(f"sup_(|r|<=n) |a - a_n| = {gap:.6g} > 4/n")
    srt = np.linspace(-(n + 1), n + 1, 20001)
    if np.any(np.diff(reg.phi(srt)) <= 0):
        problems.append("Phi_n not strictly increasing")
    coarse = np.unique(np.concatenate([np.linspace(-(n + 1), n + 1, 121), [-1.0, 1.0]]))
    rep = check_assumption_A(reg.family(3 * fam.K), coarse, brackets=reg.bracket_a)
    problems += [f"3K bound violated: {v}" for v in rep.violations()]
    if problems:
        raise RegularizationError("; ".join(problems))
    return reg


def r_lambda(a_one: Callable, a_two: Callable, lam: float, r_max: float, step: float = 1e-3) -> float:
    """Largest ``R <= r_max`` with ``|a_one - a_two| <= lam`` on ``|r| < R`` (sampled)."""
    r = np.arange(0.0, r_max + step / 2, step)
    bad = (np.abs(a_one(r) - a_two(r)) > lam) | (np.abs(a_one(-r) - a_two(-r)) > lam)
    if not bad.any():
        return math.inf
    return float(r[int(np.argmax(bad))])


# ---------------------------------------------------------------------------
# curve-shortening family
# ---------------------------------------------------------------------------


def mcf_cutoff(n: float) -> float:
    """``c_n`` fixed by the area of the linear ramp of ``b_n`` on ``[n, c_n]``."""
    return n + (1.0 + n * n) / n


def mcf_b(n: float, r):
    """``b_n``: odd, ``-r(1+r^2)^(-3/2)`` on ``[0, n]``, linear ramp to zero at ``c_n``."""
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    base = -a * (1.0 + a * a) ** -1.5
    if math.isinf(n):
        return np.sign(r) * base
    c = mcf_cutoff(n)
    bn = -n * (1.0 + n * n) ** -1.5
    ramp = bn * (c - a) / (c - n)
    out = np.where(a <= n, base, np.where(a < c, ramp, 0.0))
    return np.sign(r) * out


class McfRegularization(RegularizedNonlinearity):
    """``a_n = 1 + [b_n]``, ``Phi_n = [a_n^2]``; ``n = inf`` gives ``arctan`` exactly."""

    def __init__(self, n: float):
        if not n >= 1:
            raise ValueError("n must be >= 1")
        self.n = n
        self.m = 3.0
        self.target = make_arctan()
        if math.isinf(n):
            return
        c = mcf_cutoff(n)
        L = c - n
        P = np.polynomial.Polynomial
        self.c = c
        self._an = 1.0 / math.sqrt(1.0 + n * n)
        bn = -n * (1.0 + n * n) ** -1.5
        # on [n, c] in the shifted variable s = r - n
        self._q = P([self._an, bn, -bn / (2.0 * L)])
        self._Q1 = self._q.integ()
        self._Q2 = (self._q**2).integ()
        self.a_inf = float(self._q(L))
        self._phi_c = math.atan(n) + float(self._Q2(L))
        self._br_c = math.asinh(n) + float(self._Q1(L))

    @property
    def name(self) -> str:
        return f"mcf_n{self.n:g}"

    def a_frak(self, r):
        r = np.asarray(r, dtype=float)
        base = 1.0 / np.sqrt(1.0 + r * r)
        if math.isinf(self.n):
            return base
        a = np.abs(r)
        s = np.clip(a - self.n, 0.0, self.c - self.n)
        return np.where(a <= self.n, base, np.where(a < self.c, self._q(s), self.a_inf))

    def a_frak_prime(self, r):
        return mcf_b(self.n, r)

    def phi(self, r):
        r = np.asarray(r, dtype=float)
        if math.isinf(self.n):
            return np.arctan(r)
        a = np.abs(r)
        s = np.clip(a - self.n, 0.0, self.c - self.n)
        mid = math.atan(self.n) + self._Q2(s)
        far = self._phi_c + self.a_inf**2 * (a - self.c)
        out = np.where(a <= self.n, np.arctan(a), np.where(a < self.c, mid, far))
        return np.sign(r) * out

    def bracket_a(self, r):
        r = np.asarray(r, dtype=float)
        if math.isinf(self.n):
            return np.arcsinh(r)
        a = np.abs(r)
        s = np.clip(a - self.n, 0.0, self.c - self.n)
        mid = math.asinh(self.n) + self._Q1(s)
        far = self._br_c + self.a_inf * (a - self.c)
        out = np.where(a <= self.n, np.arcsinh(a), np.where(a < self.c, mid, far))
        return np.sign(r) * out

    def phi_prime_sup(self, R: float) -> float:
        return 1.0


def mcf_regularize(n: float) -> McfRegularization:
    return McfRegularization(n)
