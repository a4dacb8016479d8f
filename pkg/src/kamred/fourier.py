"""Sparse analytic functions on the thickened torus (angles + one space variable).

A `Fun` stores finitely many Fourier coefficients indexed by (l, k), where l
is a finite-support multi-index over the angle sites and k is the spatial
mode.  The weighted norm at width s is

    ||u||_s = sum_{l,k} e^{s (|l|_eta + |k|)} |u_hat(l, k)|,

which reduces to the pure-angle norm when all k = 0 (the "scalar" case).
Every operation is pure; instances are treated as immutable after
construction.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import (InversionError, SeriesDivergenceError, SmallnessError,
                     WidthError)
from .indices import (ZERO, add_indices, index_weight, make_index, neg_index)

DEFAULT_PRUNE_TOL = 1e-16  # relative to the current norm
DEFAULT_SERIES_TOL = 1e-14
DEFAULT_FP_TOL = 1e-13


class Fun:
    """Analytic function as a sparse coefficient table {(l, k): complex}."""

    __slots__ = ("coeffs", "sigma", "eta", "jmax", "lmax")

    def __init__(self, coeffs=None, sigma=1.0, eta=1.0, jmax=None, lmax=None):
        self.coeffs = dict(coeffs) if coeffs else {}
        self.sigma = float(sigma)
        self.eta = float(eta)
        self.jmax = jmax
        self.lmax = lmax

    # -- constructors -------------------------------------------------------

    @classmethod
    def scalar(cls, table, sigma=1.0, eta=1.0, lmax=None):
        """Angle-only function from {multi-index-like: coeff}."""
        coeffs = {}
        for mi, c in table.items():
            key = mi if isinstance(mi, tuple) else make_index(mi)
            if c != 0:
                coeffs[(key, 0)] = complex(c)
        return cls(coeffs, sigma=sigma, eta=eta, lmax=lmax)

    @classmethod
    def field(cls, table, sigma=1.0, eta=1.0, jmax=None, lmax=None):
        """Function of (x, phi) from {(multi-index-like, k): coeff}."""
        coeffs = {}
        for (mi, k), c in table.items():
            key = mi if isinstance(mi, tuple) else make_index(mi)
            if c != 0:
                coeffs[(key, int(k))] = complex(c)
        return cls(coeffs, sigma=sigma, eta=eta, jmax=jmax, lmax=lmax)

    @classmethod
    def const(cls, value, like=None, sigma=1.0, eta=1.0, jmax=None, lmax=None):
        if like is not None:
            sigma, eta, jmax, lmax = like.sigma, like.eta, like.jmax, like.lmax
        if value == 0:
            return cls({}, sigma=sigma, eta=eta, jmax=jmax, lmax=lmax)
        return cls({(ZERO, 0): complex(value)}, sigma=sigma, eta=eta,
                   jmax=jmax, lmax=lmax)

    def _like(self, coeffs, sigma=None):
        return Fun(coeffs, sigma=self.sigma if sigma is None else sigma,
                   eta=self.eta, jmax=self.jmax, lmax=self.lmax)

    # -- basic queries -------------------------------------------------------

    def __len__(self):
        return len(self.coeffs)

    def is_scalar(self):
        return all(k == 0 for _, k in self.coeffs)

    def weight(self, key):
        mi, k = key
        return index_weight(mi, self.eta) + abs(k)

    def norm(self, s=None):
        """Weighted l^1 norm at width s (defaults to the declared width)."""
        s = self.sigma if s is None else float(s)
        if s > self.sigma + 1e-15:
            raise WidthError(
                f"norm requested at s = {s} > declared width {self.sigma}")
        return sum(abs(c) * math.exp(s * self.weight(key))
                   for key, c in self.coeffs.items())

    def sup_bound(self):
        """l^1 bound on sup over real arguments: sum |coeffs|."""
        return sum(abs(c) for c in self.coeffs.values())

    def coeff(self, mi, k=0):
        key = mi if isinstance(mi, tuple) else make_index(mi)
        return self.coeffs.get((key, int(k)), 0j)

    # -- arithmetic ----------------------------------------------------------

    def __neg__(self):
        return self._like({k: -c for k, c in self.coeffs.items()})

    def __add__(self, other):
        if not isinstance(other, Fun):
            other = Fun.const(other, like=self)
        out = dict(self.coeffs)
        for key, c in other.coeffs.items():
            s = out.get(key, 0j) + c
            if s == 0:
                out.pop(key, None)
            else:
                out[key] = s
        return self._like(out, sigma=min(self.sigma, other.sigma))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if not isinstance(other, Fun):
            other = Fun.const(other, like=self)
        return self.__add__(-other)

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        if not isinstance(other, Fun):
            z = complex(other)
            if z == 0:
                return self._like({})
            return self._like({k: z * c for k, c in self.coeffs.items()})
        out = {}
        jmax = self.jmax if other.jmax is None else (
            other.jmax if self.jmax is None else min(self.jmax, other.jmax))
        lmax = self.lmax if other.lmax is None else (
            other.lmax if self.lmax is None else min(self.lmax, other.lmax))
        eta = self.eta
        # weight precomputation prunes label pairs before the index addition
        left = [(mi, k, c, index_weight(mi, eta))
                for (mi, k), c in self.coeffs.items()]
        right = [(mi, k, c, index_weight(mi, eta))
                 for (mi, k), c in other.coeffs.items()]
        sum_cache = {}
        for mi1, k1, c1, w1 in left:
            for mi2, k2, c2, w2 in right:
                k = k1 + k2
                if jmax is not None and abs(k) > jmax:
                    continue
                if lmax is not None and w1 + w2 > lmax + 1e-12:
                    pk = (mi1, mi2)
                    mi = sum_cache.get(pk)
                    if mi is None:
                        mi = add_indices(mi1, mi2)
                        sum_cache[pk] = mi
                    if index_weight(mi, eta) > lmax + 1e-12:
                        continue
                else:
                    pk = (mi1, mi2)
                    mi = sum_cache.get(pk)
                    if mi is None:
                        mi = add_indices(mi1, mi2)
                        sum_cache[pk] = mi
                key = (mi, k)
                s = out.get(key, 0j) + c1 * c2
                if s == 0:
                    out.pop(key, None)
                else:
                    out[key] = s
        res = Fun(out, sigma=min(self.sigma, other.sigma), eta=eta,
                  jmax=jmax, lmax=lmax)
        return res.prune()

    def __rmul__(self, other):
        return self.__mul__(other)

    def prune(self, rel_tol=DEFAULT_PRUNE_TOL):
        """Drop entries whose weighted size is below rel_tol * current norm."""
        if not self.coeffs:
            return self
        nrm = self.norm()
        cut = rel_tol * nrm
        out = {key: c for key, c in self.coeffs.items()
               if abs(c) * math.exp(self.sigma * self.weight(key)) >= cut}
        return self._like(out)

    def conjugate_fun(self):
        """Complex conjugate as a function of real arguments."""
        return self._like({(neg_index(mi), -k): c.conjugate()
                           for (mi, k), c in self.coeffs.items()})

    def reality_defect(self):
        """max |u_hat(l,k) - conj(u_hat(-l,-k))|; 0 for real-on-real u."""
        d = 0.0
        for (mi, k), c in self.coeffs.items():
            mirror = self.coeffs.get((neg_index(mi), -k), 0j)
            d = max(d, abs(c - mirror.conjugate()))
        return d

    # -- calculus ------------------------------------------------------------

    def x_derivative(self, m=1):
        """partial_x^m with the convention that negative orders kill k = 0."""
        out = {}
        for (mi, k), c in self.coeffs.items():
            if k == 0:
                if m == 0:
                    out[(mi, k)] = c
                elif m < 0:
                    continue  # partial_x^{-1}[1] = 0
                # m > 0: derivative of the constant mode vanishes
                continue
            out[(mi, k)] = c * (1j * k) ** m
        return self._like(out)

    def x_average(self):
        """<u>_x: the k = 0 part, an angle-only function."""
        return self._like({key: c for key, c in self.coeffs.items()
                           if key[1] == 0})

    def x_fluctuation(self):
        return self._like({key: c for key, c in self.coeffs.items()
                           if key[1] != 0})

    def average(self):
        """<u>_{x,phi}: the (0, 0) coefficient."""
        return self.coeffs.get((ZERO, 0), 0j)

    def omega_derivative(self, omega):
        """omega . partial_phi: coefficient map c -> i (omega . l) c."""
        out = {}
        for (mi, k), c in self.coeffs.items():
            d = omega.dot(mi)
            if d != 0.0:
                out[(mi, k)] = 1j * d * c
        return self._like(out)

    def solve_homological(self, omega):
        """Unique zero-average solution of omega . partial_phi u = self.

        Requires a vanishing phi-average (for every spatial mode) and that
        omega clears its Diophantine floor on the whole support.
        """
        nrm = self.norm()
        for (mi, k), c in self.coeffs.items():
            if mi == ZERO and abs(c) > 1e-14 * max(1.0, nrm):
                raise SmallnessError(
                    f"homological data has nonzero average at k = {k}: {c}")
        out = {}
        for (mi, k), c in self.coeffs.items():
            if mi == ZERO:
                continue
            d = omega.check_divisor(mi)
            out[(mi, k)] = c / (1j * d)
        return self._like(out)

    def project_uv(self, n_cut):
        """Split into (|l|_eta <= N, |l|_eta > N); low + high == self exactly."""
        low, high = {}, {}
        for key, c in self.coeffs.items():
            mi, _ = key
            if index_weight(mi, self.eta) <= n_cut + 1e-12:
                low[key] = c
            else:
                high[key] = c
        return self._like(low), self._like(high)

    # -- evaluation ----------------------------------------------------------

    def evaluate_profile(self, phi, jmax=None):
        """Coefficient vector over k in [-J, J] at the real angle phi.

        phi: {site: value}.  Returns a complex ndarray of length 2J + 1 with
        index k + J.
        """
        J = self.jmax if jmax is None else jmax
        if J is None:
            J = max((abs(k) for _, k in self.coeffs), default=0)
        out = np.zeros(2 * J + 1, dtype=complex)
        cache = {}
        for (mi, k), c in self.coeffs.items():
            if abs(k) > J:
                continue
            ph = cache.get(mi)
            if ph is None:
                ang = sum(e * phi.get(n, 0.0) for n, e in mi)
                ph = complex(math.cos(ang), math.sin(ang))
                cache[mi] = ph
            out[k + J] += c * ph
        return out

    def evaluate(self, phi, x=0.0):
        """Pointwise value at real angles phi ({site: value}) and position x."""
        tot = 0j
        for (mi, k), c in self.coeffs.items():
            ang = sum(e * phi.get(n, 0.0) for n, e in mi) + k * x
            tot += c * complex(math.cos(ang), math.sin(ang))
        return tot

    # -- serialization -------------------------------------------------------

    def dump(self):
        """Line-oriented text format; one record per coefficient.

        Header carries eta, sigma, J_max; records are
        `sites:exponents | k | re | im` with `-` for the empty multi-index.
        Floats are printed shortest round-trip, so load(dump(u)) == u.
        """
        lines = ["# kamred fun v1",
                 f"eta {self.eta!r}",
                 f"sigma {self.sigma!r}",
                 f"jmax {self.jmax if self.jmax is not None else '-'}"]
        for (mi, k) in sorted(self.coeffs):
            c = self.coeffs[(mi, k)]
            sites = ",".join(f"{n}:{e}" for n, e in mi) if mi else "-"
            lines.append(f"{sites} | {k} | {c.real!r} | {c.imag!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, text):
        eta = sigma = None
        jmax = None
        coeffs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("eta "):
                eta = float(line.split()[1])
            elif line.startswith("sigma "):
                sigma = float(line.split()[1])
            elif line.startswith("jmax "):
                tok = line.split()[1]
                jmax = None if tok == "-" else int(tok)
            else:
                sites, k, re, im = (t.strip() for t in line.split("|"))
                mi = ZERO if sites == "-" else make_index(
                    tuple(tuple(map(int, p.split(":"))) for p in sites.split(",")))
                coeffs[(mi, int(k))] = complex(float(re), float(im))
        return cls(coeffs, sigma=sigma, eta=eta, jmax=jmax)


# -- analytic composition ----------------------------------------------------

def _binom_series(alpha):
    """Coefficient generator for (1 + z)^alpha, radius 1."""
    def coeff(n):
        c = 1.0
        for t in range(n):
            c *= (alpha - t) / (t + 1)
        return c
    return coeff


SERIES = {
    "exp": (lambda n: 1.0 / math.factorial(n), math.inf),
    "inv1p": (lambda n: (-1.0) ** n, 1.0),                  # 1/(1+z)
    "sqrt1p": (_binom_series(0.5), 1.0),                    # sqrt(1+z)
    "inv_sqrt1p": (_binom_series(-0.5), 1.0),               # 1/sqrt(1+z)
    "inv_sq1p": (lambda n: (-1.0) ** n * (n + 1), 1.0),     # 1/(1+z)^2
}


def compose_analytic(series, u, tol=DEFAULT_SERIES_TOL, max_terms=160):
    """Sum f(u) = sum_n a_n u^n in the weighted algebra.

    `series` is a name from SERIES or a (coeff_fn, radius) pair.  Terms are
    added until the running term norm stays below tol (relative), which the
    submultiplicative norm turns into a tail bound.
    """
    coeff_fn, radius = SERIES[series] if isinstance(series, str) else series
    r = u.norm()
    if r >= radius:
        raise SeriesDivergenceError(
            f"||u||_sigma = {r:.3e} >= series radius {radius}")
    acc = Fun.const(coeff_fn(0), like=u)
    power = Fun.const(1.0, like=u)
    scale = max(1.0, abs(coeff_fn(0)))
    quiet = 0
    for n in range(1, max_terms):
        power = (power * u).prune()
        a = coeff_fn(n)
        term_norm = abs(a) * power.norm()
        if a != 0:
            acc = acc + a * power
        scale = max(scale, acc.norm())
        if term_norm < tol * scale and n >= max(2, int(r) + 1):
            quiet += 1
            if quiet >= 2:
                return acc.prune()
        else:
            quiet = 0
    raise SeriesDivergenceError(
        f"series did not settle in {max_terms} terms (||u|| = {r:.3e})")


# -- torus diffeomorphisms ---------------------------------------------------

def compose_angle_shift(u, omega, alpha, sigma_out=None,
                        tol=DEFAULT_SERIES_TOL):
    """u(phi + omega * alpha(phi)) for a scalar shift amplitude alpha.

    Uses the exponential-series expansion coefficient by coefficient: the
    label l picks up the factor exp(i (omega . l) alpha(phi)).  The width
    loss rho = u.sigma - sigma_out must dominate ||omega|| * ||alpha||.
    """
    if sigma_out is None:
        sigma_out = alpha.sigma
    rho = u.sigma - sigma_out
    shift_size = omega.sup_norm() * alpha.norm(min(alpha.sigma, sigma_out))
    if shift_size > rho + 1e-15:
        raise SmallnessError(
            f"angle shift too large: ||omega alpha|| = {shift_size:.3e} "
            f"> width loss rho = {rho:.3e}")
    out = Fun({}, sigma=sigma_out, eta=u.eta, jmax=u.jmax, lmax=u.lmax)
    groups = {}
    for (mi, k), c in u.coeffs.items():
        groups.setdefault(mi, []).append((k, c))
    for mi, terms in groups.items():
        d = omega.dot(mi)
        if d == 0.0:
            factor = Fun.const(1.0, like=alpha)
        else:
            factor = compose_analytic("exp", (1j * d) * alpha, tol=tol)
        for mi2_k, fc in factor.coeffs.items():
            mi2, _ = mi2_k
            mi_tot = add_indices(mi, mi2)
            if u.lmax is not None and index_weight(mi_tot, u.eta) > u.lmax + 1e-12:
                continue
            for k, c in terms:
                key = (mi_tot, k)
                s = out.coeffs.get(key, 0j) + c * fc
                if s == 0:
                    out.coeffs.pop(key, None)
                else:
                    out.coeffs[key] = s
    return out.prune()


def compose_x_shift(u, beta, sigma_out=None, tol=DEFAULT_SERIES_TOL):
    """u(x + beta(x, phi), phi): each spatial mode k picks up exp(i k beta)."""
    if sigma_out is None:
        sigma_out = beta.sigma
    kmax = max((abs(k) for _, k in u.coeffs), default=0)
    rho = u.sigma - sigma_out
    # mode k picks up exp(|k| ||beta||), absorbed by the width loss e^{rho |k|}
    if beta.norm(min(beta.sigma, sigma_out)) > max(rho, 0.0) + 1e-15:
        raise SmallnessError(
            f"x shift too large: ||beta|| = "
            f"{beta.norm(min(beta.sigma, sigma_out)):.3e} > rho = {rho:.3e}")
    e_plus = compose_analytic("exp", 1j * beta, tol=tol)
    e_minus = compose_analytic("exp", -1j * beta, tol=tol)
    powers = {0: Fun.const(1.0, like=beta)}
    for k in range(1, kmax + 1):
        powers[k] = (powers[k - 1] * e_plus).prune()
    for k in range(1, kmax + 1):
        powers[-k] = (powers[-(k - 1)] * e_minus).prune()
    out = Fun({}, sigma=sigma_out, eta=u.eta, jmax=u.jmax, lmax=u.lmax)
    for (mi, k), c in u.coeffs.items():
        pk = powers[k]
        for (mi2, k2), pc in pk.coeffs.items():
            kk = k + k2
            if u.jmax is not None and abs(kk) > u.jmax:
                continue
            mi_tot = add_indices(mi, mi2)
            if u.lmax is not None and index_weight(mi_tot, u.eta) > u.lmax + 1e-12:
                continue
            key = (mi_tot, kk)
            s = out.coeffs.get(key, 0j) + c * pc
            if s == 0:
                out.coeffs.pop(key, None)
            else:
                out.coeffs[key] = s
    return out.prune()


def _fixed_point_invert(shift, compose, fp_tol, max_iter=200):
    """Solve a_tilde = -shift(. + a_tilde) by iteration; error on growth."""
    current = -shift
    scale = max(shift.norm(), 1e-30)
    prev_delta = math.inf
    for _ in range(max_iter):
        nxt = -compose(current)
        delta = (nxt - current).norm()
        if delta < fp_tol * max(1.0, scale):
            return nxt
        if delta > 4.0 * max(prev_delta, scale):
            raise InversionError(
                f"fixed-point iterates grow: delta = {delta:.3e}")
        prev_delta = delta
        current = nxt
    raise InversionError(f"no contraction after {max_iter} iterations")


def invert_angle_shift(omega, alpha, rho=None, fp_tol=DEFAULT_FP_TOL):
    """Inverse amplitude a_tilde of phi -> phi + omega alpha(phi).

    The certificate is the explicit contraction factor of the fixed-point
    map: ||omega|| * ||alpha|| / (e rho) <= 1/2 (Cauchy constant made
    conservative).
    """
    if rho is None:
        rho = alpha.sigma / 4.0
    factor = omega.sup_norm() * alpha.norm() / (math.e * rho)
    if factor > 0.5:
        raise InversionError(
            f"inversion threshold violated: contraction estimate "
            f"{factor:.3e} > 1/2 (||alpha|| = {alpha.norm():.3e}, rho = {rho})")
    sigma_out = alpha.sigma - rho

    def compose(a_t):
        return compose_angle_shift(alpha, omega, a_t, sigma_out=sigma_out)

    return _fixed_point_invert(alpha, compose, fp_tol)


def invert_x_shift(beta, rho=None, fp_tol=DEFAULT_FP_TOL):
    """Inverse amplitude beta_tilde of x -> x + beta(x, phi).

    Same fixed-point machinery as the angle case, with x treated as one more
    (distinguished) angle; the contraction certificate uses the spatial
    Cauchy constant.
    """
    if rho is None:
        rho = beta.sigma / 4.0
    factor = beta.norm() / (math.e * rho)
    if factor > 0.5:
        raise InversionError(
            f"inversion threshold violated: contraction estimate "
            f"{factor:.3e} > 1/2 (||beta|| = {beta.norm():.3e}, rho = {rho})")
    sigma_out = beta.sigma - rho

    def compose(b_t):
        return compose_x_shift(beta, b_t, sigma_out=sigma_out)

    return _fixed_point_invert(beta, compose, fp_tol)
