"""2x2-block operator calculus on the truncated spatial modes.

Operators act on Fourier modes k in [-J, J] (array index k + J) and are
grouped into clusters E_j = span{e^{ijx}, e^{-ijx}}; the block (j, j') is the
2x2 (1-dim when a cluster is 0) submatrix with row modes (+j, -j) and column
modes (+j', -j').  A phi-dependent family is a sparse table multi-index ->
matrix with the decay norm

    |R|_{sigma, m} = sum_l e^{sigma |l|_eta} ||R_hat(l)||_{B^{sigma, m}},
    ||A||_{B^{sigma, m}} = sup_{j'} sum_j e^{sigma |j-j'|} ||block||_HS <j'>^{-m}.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import SmallnessError, WidthError
from .fourier import DEFAULT_SERIES_TOL, Fun
from .indices import ZERO, add_indices, index_weight, neg_index

# -- block helpers -----------------------------------------------------------


def block_hs_table(data):
    """(J+1)x(J+1) table of Hilbert-Schmidt block norms of a mode matrix."""
    J = (data.shape[0] - 1) // 2
    a2 = np.abs(data) ** 2
    p = a2[J:, J:]
    q = a2[J:, :J + 1][:, ::-1]
    r = a2[:J + 1, J:][::-1, :]
    s = a2[:J + 1, :J + 1][::-1, ::-1]
    b2 = p + q + r + s
    b2[0, :] *= 0.5
    b2[:, 0] *= 0.5
    return np.sqrt(b2)


_EXP_CACHE = {}


def _exp_weight(J, sigma):
    key = (J, round(float(sigma), 14))
    w = _EXP_CACHE.get(key)
    if w is None:
        j = np.arange(J + 1)
        w = np.exp(sigma * np.abs(j[:, None] - j[None, :]))
        _EXP_CACHE[key] = w
    return w


def bsm_norm(data, sigma, m):
    """||A||_{B^{sigma, m}} of a single mode matrix."""
    J = (data.shape[0] - 1) // 2
    b = block_hs_table(data)
    col = np.maximum(np.arange(J + 1), 1.0) ** (-float(m))
    sums = (_exp_weight(J, sigma) * b).sum(axis=0) * col
    return float(sums.max(initial=0.0))


def get_block(data, j, jp):
    """Copy of the (j, j') block; 2x2 with rows (+j, -j) unless a cluster is 0."""
    J = (data.shape[0] - 1) // 2
    rows = [J] if j == 0 else [J + j, J - j]
    cols = [J] if jp == 0 else [J + jp, J - jp]
    return data[np.ix_(rows, cols)].copy()


def set_block(data, j, jp, block):
    J = (data.shape[0] - 1) // 2
    rows = [J] if j == 0 else [J + j, J - j]
    cols = [J] if jp == 0 else [J + jp, J - jp]
    data[np.ix_(rows, cols)] = block


def hs_norm(block):
    return float(np.sqrt((np.abs(block) ** 2).sum()))


def block_trace(block):
    return complex(np.trace(np.atleast_2d(block)))


def block_eigs(block):
    """Ascending real eigenvalues of a hermitian 1x1 / 2x2 block."""
    b = np.atleast_2d(block)
    if hs_norm(b - b.conj().T) > 1e-10 * max(1.0, hs_norm(b)):
        raise ValueError("block is not hermitian")
    if b.shape == (1, 1):
        return np.array([b[0, 0].real])
    a, d = b[0, 0].real, b[1, 1].real
    off = abs(b[0, 1])
    half = 0.5 * (a + d)
    disc = math.sqrt(0.25 * (a - d) ** 2 + off ** 2)
    return np.array([half - disc, half + disc])


def melnikov_inverse_norm(omega_dot_l, dj, djp):
    """||O^{-1}||_Op for O = (omega.l) Id + M_L(D_j) - M_R(D_j').

    Closed form via spec(M_L(A) - M_R(B)) = {lambda - mu}: the inverse norm is
    1 / min |omega.l + lambda_i - mu_k|; math.inf signals a singular O.
    """
    lams = block_eigs(dj)
    mus = block_eigs(djp)
    m = min(abs(omega_dot_l + lam - mu) for lam in lams for mu in mus)
    if m == 0.0:
        return math.inf
    return 1.0 / m


def sylvester_solve_block(omega_dot_l, dj, djp, rhs):
    """Solve (-omega.l) X + D_j X - X D_j' = rhs for hermitian blocks.

    Returns (X, min|denominator|); denominators are -omega.l + lambda - mu
    over the eigenvalue pairs.
    """
    a = np.atleast_2d(dj)
    b = np.atleast_2d(djp)
    r = np.atleast_2d(rhs)
    lam, u = np.linalg.eigh(a)
    mu, v = np.linalg.eigh(b)
    g = u.conj().T @ r @ v
    den = -omega_dot_l + lam[:, None] - mu[None, :]
    x = u @ (g / den) @ v.conj().T
    return x, float(np.abs(den).min())


# -- phi-dependent operators -------------------------------------------------


class QPOp:
    """Sparse phi-dependent operator family {multi-index: mode matrix}."""

    __slots__ = ("labels", "jmax", "sigma", "eta", "lmax", "order")

    def __init__(self, labels=None, jmax=8, sigma=1.0, eta=1.0, lmax=None,
                 order=0.0):
        self.labels = {} if labels is None else dict(labels)
        self.jmax = int(jmax)
        self.sigma = float(sigma)
        self.eta = float(eta)
        self.lmax = lmax
        self.order = float(order)

    @property
    def dim(self):
        return 2 * self.jmax + 1

    def _like(self, labels, sigma=None, order=None):
        return QPOp(labels, jmax=self.jmax,
                    sigma=self.sigma if sigma is None else sigma,
                    eta=self.eta, lmax=self.lmax,
                    order=self.order if order is None else order)

    @classmethod
    def identity(cls, jmax, sigma=1.0, eta=1.0, lmax=None):
        return cls({ZERO: np.eye(2 * jmax + 1, dtype=complex)}, jmax=jmax,
                   sigma=sigma, eta=eta, lmax=lmax, order=0.0)

    @classmethod
    def zero(cls, jmax, sigma=1.0, eta=1.0, lmax=None, order=0.0):
        return cls({}, jmax=jmax, sigma=sigma, eta=eta, lmax=lmax, order=order)

    def copy(self):
        return self._like({mi: m.copy() for mi, m in self.labels.items()})

    # -- norms ----------------------------------------------------------------

    def decay_norm(self, s=None, m=None):
        s = self.sigma if s is None else float(s)
        m = self.order if m is None else float(m)
        if s > self.sigma + 1e-15:
            raise WidthError(f"norm at s = {s} > declared width {self.sigma}")
        tot = 0.0
        for mi, mat in self.labels.items():
            tot += math.exp(s * index_weight(mi, self.eta)) * bsm_norm(mat, s, m)
        return tot

    def label_norms(self, s, m):
        return {mi: bsm_norm(mat, s, m) for mi, mat in self.labels.items()}

    def prune(self, rel_tol=1e-16, s=None, m=None):
        """Drop labels whose weighted B-norm is below rel_tol * decay norm."""
        if not self.labels:
            return self
        s = self.sigma if s is None else s
        m = self.order if m is None else m
        weighted = {mi: math.exp(s * index_weight(mi, self.eta))
                    * bsm_norm(mat, s, m) for mi, mat in self.labels.items()}
        total = sum(weighted.values())
        cut = rel_tol * total
        return self._like({mi: mat for mi, mat in self.labels.items()
                           if weighted[mi] >= cut})

    # -- algebra ----------------------------------------------------------------

    def __add__(self, other):
        out = {mi: m.copy() for mi, m in self.labels.items()}
        for mi, m in other.labels.items():
            if mi in out:
                out[mi] = out[mi] + m
            else:
                out[mi] = m.copy()
        return self._like(out, sigma=min(self.sigma, other.sigma),
                          order=max(self.order, other.order))

    def __sub__(self, other):
        return self + (-1.0) * other

    def __neg__(self):
        return (-1.0) * self

    def __mul__(self, z):
        z = complex(z)
        return self._like({mi: z * m for mi, m in self.labels.items()})

    __rmul__ = __mul__

    def __matmul__(self, other):
        """Composition: Fourier convolution in l, matrix product in modes."""
        out = {}
        lmax = self.lmax if other.lmax is None else (
            other.lmax if self.lmax is None else min(self.lmax, other.lmax))
        for mi1, a in self.labels.items():
            w1 = index_weight(mi1, self.eta)
            for mi2, b in other.labels.items():
                if lmax is not None and w1 + index_weight(mi2, self.eta) \
                        > lmax + 1e-12:
                    continue
                mi = add_indices(mi1, mi2)
                if lmax is not None and index_weight(mi, self.eta) > lmax + 1e-12:
                    continue
                prod = a @ b
                if mi in out:
                    out[mi] += prod
                else:
                    out[mi] = prod
        return QPOp(out, jmax=self.jmax, sigma=min(self.sigma, other.sigma),
                    eta=self.eta, lmax=lmax, order=self.order + other.order)

    def adjoint(self):
        """(R*)(phi) for real phi: label l -> conj-transpose at -l."""
        return self._like({neg_index(mi): m.conj().T
                           for mi, m in self.labels.items()})

    def selfadjoint_defect(self):
        """max_l || R_hat(l)^* - R_hat(-l) ||_HS (0 for self-adjoint families)."""
        d = 0.0
        keys = set(self.labels) | {neg_index(mi) for mi in self.labels}
        z = np.zeros((self.dim, self.dim), dtype=complex)
        for mi in keys:
            a = self.labels.get(mi, z)
            b = self.labels.get(neg_index(mi), z)
            d = max(d, float(np.abs(a.conj().T - b).max()))
        return d

    def skew_defect(self):
        d = 0.0
        keys = set(self.labels) | {neg_index(mi) for mi in self.labels}
        z = np.zeros((self.dim, self.dim), dtype=complex)
        for mi in keys:
            a = self.labels.get(mi, z)
            b = self.labels.get(neg_index(mi), z)
            d = max(d, float(np.abs(a.conj().T + b).max()))
        return d

    def omega_derivative(self, omega):
        out = {}
        for mi, m in self.labels.items():
            d = omega.dot(mi)
            if d != 0.0:
                out[mi] = (1j * d) * m
        return self._like(out)

    def uv_project(self, n_cut):
        low, high = {}, {}
        for mi, m in self.labels.items():
            (low if index_weight(mi, self.eta) <= n_cut + 1e-12
             else high)[mi] = m.copy()
        return self._like(low), self._like(high)

    def block_diag_part(self):
        """[R]: keep only entries with |k| = |k'| in every label."""
        J = self.jmax
        k = np.arange(-J, J + 1)
        mask = (np.abs(k)[:, None] == np.abs(k)[None, :])
        return self._like({mi: m * mask for mi, m in self.labels.items()})

    def zero_label_block_diag(self):
        """[R_hat(0)] as a single mode matrix (zeros if absent)."""
        J = self.jmax
        m = self.labels.get(ZERO)
        if m is None:
            return np.zeros((self.dim, self.dim), dtype=complex)
        k = np.arange(-J, J + 1)
        mask = (np.abs(k)[:, None] == np.abs(k)[None, :])
        return m * mask

    # -- action -----------------------------------------------------------------

    def evaluate_at_phi(self, phi):
        """Mode matrix at a real angle configuration {site: value}."""
        out = np.zeros((self.dim, self.dim), dtype=complex)
        for mi, m in self.labels.items():
            ang = sum(e * phi.get(n, 0.0) for n, e in mi)
            out += complex(math.cos(ang), math.sin(ang)) * m
        return out

    def apply_fun(self, u: Fun) -> Fun:
        """Action on an analytic field, convolving the angle labels."""
        J = self.jmax
        groups = {}
        for (mi, k), c in u.coeffs.items():
            if abs(k) > J:
                continue
            vec = groups.get(mi)
            if vec is None:
                vec = np.zeros(self.dim, dtype=complex)
                groups[mi] = vec
            vec[k + J] = c
        out = {}
        for mi1, m in self.labels.items():
            for mi2, vec in groups.items():
                mi = add_indices(mi1, mi2)
                if u.lmax is not None and index_weight(mi, self.eta) \
                        > u.lmax + 1e-12:
                    continue
                res = m @ vec
                for k in range(-J, J + 1):
                    c = res[k + J]
                    if c != 0:
                        key = (mi, k)
                        out[key] = out.get(key, 0j) + c
        return Fun(out, sigma=min(self.sigma, u.sigma), eta=self.eta,
                   jmax=J, lmax=u.lmax).prune()

    # -- serialization ------------------------------------------------------------

    def dump(self):
        """Operator text dump: header (sigma, m, eta, J_max), then records
        `l | j | j' | 4 complex entries` (cluster-0 blocks zero padded)."""
        lines = ["# kamred operator v1",
                 f"sigma {self.sigma!r}",
                 f"m {self.order!r}",
                 f"eta {self.eta!r}",
                 f"jmax {self.jmax}"]
        for mi in sorted(self.labels):
            mat = self.labels[mi]
            sites = ",".join(f"{n}:{e}" for n, e in mi) if mi else "-"
            for j in range(self.jmax + 1):
                for jp in range(self.jmax + 1):
                    blk = get_block(mat, j, jp)
                    full = np.zeros((2, 2), dtype=complex)
                    full[:blk.shape[0], :blk.shape[1]] = blk
                    if not np.any(full):
                        continue
                    ent = " ".join(f"{float(z.real)!r} {float(z.imag)!r}"
                                   for z in full.ravel())
                    lines.append(f"{sites} | {j} | {jp} | {ent}")
        return "\n".join(lines) + "\n"


def load_operator(text) -> QPOp:
    """Inverse of QPOp.dump (bit-exact for round-trip floats)."""
    from .indices import make_index
    sigma = eta = order = None
    jmax = None
    labels = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        head = line.split(None, 1)
        if head[0] in ("sigma", "m", "eta"):
            val = float(head[1])
            if head[0] == "sigma":
                sigma = val
            elif head[0] == "m":
                order = val
            else:
                eta = val
            continue
        if head[0] == "jmax":
            jmax = int(head[1])
            continue
        sites, j, jp, ent = (t.strip() for t in line.split("|"))
        mi = () if sites == "-" else make_index(
            tuple(tuple(map(int, p.split(":"))) for p in sites.split(",")))
        j, jp = int(j), int(jp)
        nums = [float(x) for x in ent.split()]
        full = np.array([complex(nums[2 * i], nums[2 * i + 1])
                         for i in range(4)]).reshape(2, 2)
        mat = labels.get(mi)
        if mat is None:
            mat = np.zeros((2 * jmax + 1, 2 * jmax + 1), dtype=complex)
            labels[mi] = mat
        rows = 1 if j == 0 else 2
        cols = 1 if jp == 0 else 2
        set_block(mat, j, jp, full[:rows, :cols])
    return QPOp(labels, jmax=jmax, sigma=sigma, eta=eta, order=order or 0.0)


# -- materializers -------------------------------------------------------------


def dx_matrix(m, jmax):
    """partial_x^m as a diagonal mode matrix; negative orders kill k = 0."""
    k = np.arange(-jmax, jmax + 1).astype(complex)
    if m >= 0:
        diag = (1j * k) ** m
    else:
        diag = np.zeros(2 * jmax + 1, dtype=complex)
        nz = k != 0
        diag[nz] = (1j * k[nz]) ** m
    return np.diag(diag)


def dx_op(m, jmax, sigma=1.0, eta=1.0, lmax=None):
    return QPOp({ZERO: dx_matrix(m, jmax)}, jmax=jmax, sigma=sigma, eta=eta,
                lmax=lmax, order=float(m))


def mult_matrix(a: Fun, mi, jmax):
    """Mode matrix of multiplication by the l-slice of a at multi-index mi."""
    J = jmax
    m = np.zeros((2 * J + 1, 2 * J + 1), dtype=complex)
    for (mi2, kd), c in a.coeffs.items():
        if mi2 != mi or abs(kd) > 2 * J:
            continue
        lo = max(-J, -J - kd)
        hi = min(J, J - kd)
        if lo > hi:
            continue
        cols = np.arange(lo, hi + 1)
        m[cols + kd + J, cols + J] += c
    return m


def multiplication_operator(a: Fun, jmax=None, lmax=None) -> QPOp:
    """M_a as a QPOp; block entries read off the Fourier table of a."""
    J = a.jmax if jmax is None else jmax
    if J is None:
        J = max((abs(k) for _, k in a.coeffs), default=0)
    labels = {}
    for mi in {mi for mi, _ in a.coeffs}:
        labels[mi] = mult_matrix(a, mi, J)
    return QPOp(labels, jmax=J, sigma=a.sigma, eta=a.eta,
                lmax=a.lmax if lmax is None else lmax, order=0.0)


def symbol_op(a: Fun, m: int, jmax, lmax=None) -> QPOp:
    """a(x, phi) partial_x^m as an operator table."""
    op = multiplication_operator(a, jmax=jmax, lmax=lmax)
    dxm = dx_matrix(m, jmax)
    return QPOp({mi: mat @ dxm for mi, mat in op.labels.items()}, jmax=jmax,
                sigma=a.sigma, eta=a.eta, lmax=lmax, order=float(m))


def taylor_coeff(m, i):
    """c_{i,m}: generalized binomial coefficient of j^m about j'."""
    c = 1.0
    for t in range(i):
        c *= (m - t) / (t + 1)
    return c


def pdo_expand(a: Fun, m: int, mp: int, n_terms: int, jmax, lmax=None):
    """Homogeneous expansion of partial_x^m a partial_x^{m'}.

    Returns (terms, remainder): terms is a list of (coefficient field, order)
    with c_{0,m} = 1, c_{1,m} = m, and the remainder is assembled exactly as
    the operator difference, so terms + remainder reproduce the full operator
    on the truncation to round-off.
    """
    if n_terms < 1:
        raise ValueError("need at least one expansion term")
    full = (dx_op(m, jmax, sigma=a.sigma, eta=a.eta, lmax=lmax)
            @ multiplication_operator(a, jmax=jmax, lmax=lmax)
            @ dx_op(mp, jmax, sigma=a.sigma, eta=a.eta, lmax=lmax))
    terms = []
    acc = QPOp.zero(jmax, sigma=a.sigma, eta=a.eta, lmax=lmax)
    for i in range(n_terms):
        coeff = taylor_coeff(m, i)
        fld = (coeff * a.x_derivative(i)) if i else (coeff * a)
        terms.append((fld, m + mp - i))
        acc = acc + symbol_op(fld, m + mp - i, jmax, lmax=lmax)
    remainder = full - acc
    remainder.order = float(m + mp - n_terms)
    return terms, remainder


def commutator_expand(a: Fun, m: int, b: Fun, mp: int, n_terms: int, jmax,
                      lmax=None):
    """Expansion of [a d^m, b d^m'] via two pdo expansions.

    Leading term (m a b_x - m' a_x b) d^{m+m'-1}; returns (terms, remainder)
    with the same exactness contract as pdo_expand.
    """
    ab_terms, ab_rem = _compose_symbol(a, m, b, mp, n_terms, jmax, lmax)
    ba_terms, ba_rem = _compose_symbol(b, mp, a, m, n_terms, jmax, lmax)
    orders = {}
    for fld, order in ab_terms:
        orders[order] = orders.get(order, Fun.const(0, like=fld)) + fld
    for fld, order in ba_terms:
        orders[order] = orders.get(order, Fun.const(0, like=fld)) - fld
    terms = [(fld, order) for order, fld in sorted(orders.items(),
                                                   reverse=True)]
    remainder = ab_rem - ba_rem
    remainder.order = float(m + mp - n_terms)
    return terms, remainder


def _compose_symbol(a, m, b, mp, n_terms, jmax, lmax):
    """(a d^m)(b d^m') = sum_i c_{i,m} a (d^i b) d^{m+m'-i} + remainder."""
    full = symbol_op(a, m, jmax, lmax=lmax) @ symbol_op(b, mp, jmax, lmax=lmax)
    terms = []
    acc = QPOp.zero(jmax, sigma=min(a.sigma, b.sigma), eta=a.eta, lmax=lmax)
    for i in range(n_terms):
        fld = taylor_coeff(m, i) * (a * b.x_derivative(i))
        terms.append((fld, m + mp - i))
        acc = acc + symbol_op(fld, m + mp - i, jmax, lmax=lmax)
    rem = full - acc
    rem.order = float(m + mp - n_terms)
    return terms, rem


# -- exponentials and conjugation ----------------------------------------------


def op_exponential(f: QPOp, rho, delta=0.1, series_tol=DEFAULT_SERIES_TOL,
                   max_terms=40):
    """exp(F) by its power series under the smallness certificate
    rho^{-2} |F|_{sigma} <= delta; terms decay factorially once small."""
    size = f.decay_norm(m=0.0)
    if size / rho ** 2 > delta:
        raise SmallnessError(
            f"exponential smallness violated: rho^-2 |F| = "
            f"{size / rho ** 2:.3e} > delta = {delta}")
    acc = QPOp.identity(f.jmax, sigma=f.sigma, eta=f.eta, lmax=f.lmax)
    term = acc
    for n in range(1, max_terms + 1):
        term = (term @ f) * (1.0 / n)
        term = term.prune()
        acc = acc + term
        if term.decay_norm(m=0.0) < series_tol * max(1.0, acc.decay_norm(m=0.0)):
            break
    return acc.prune()


def lie_transform(x: QPOp, f: QPOp, weights, tol=DEFAULT_SERIES_TOL,
                  max_terms=60):
    """sum_k w_k ad^k(X) with ad(Y) = [Y, F] and w_k = weights(k).

    Closed form of the tau-integrals of exp-conjugations; no quadrature.
    """
    acc = weights(0) * x
    term = x
    scale = max(1.0, acc.decay_norm(m=0.0))
    for k in range(1, max_terms):
        term = (term @ f - f @ term).prune()
        w = weights(k)
        if w != 0.0:
            acc = acc + w * term
        tn = abs(w) * term.decay_norm(m=0.0)
        scale = max(scale, acc.decay_norm(m=0.0))
        if tn < tol * scale:
            return acc.prune()
    raise SmallnessError(f"Lie series did not settle in {max_terms} terms")


def _w_exp_conj(k):
    return 1.0 / math.factorial(k)


def _w_int_plain(k):
    # integral_0^1 e^{-tau F} Y e^{tau F} dtau
    return 1.0 / math.factorial(k + 1)


def _w_int_oneminus(k):
    # integral_0^1 (1 - tau) e^{-tau F} Y e^{tau F} dtau
    return 1.0 / (math.factorial(k) * (k + 1) * (k + 2))


def exp_conjugate(x: QPOp, f: QPOp, tol=DEFAULT_SERIES_TOL):
    """exp(-F) X exp(F) via the adjoint Lie series."""
    return lie_transform(x, f, _w_exp_conj, tol=tol)


def integral_conjugate(x: QPOp, f: QPOp, one_minus_tau=False,
                       tol=DEFAULT_SERIES_TOL):
    return lie_transform(x, f, _w_int_oneminus if one_minus_tau
                         else _w_int_plain, tol=tol)


def conjugate_pushforward(l_op: QPOp, f: QPOp, omega, tol=DEFAULT_SERIES_TOL):
    """Pushforward of L under exp(F):

        exp(-F) L exp(F) - exp(-F) (omega . d_phi exp(F))
      = sum 1/n! ad^n(L) - sum 1/(n+1)! ad^n(omega . d_phi F).

    Skew-adjointness of L is preserved for skew F (unitary exp(F)).
    """
    part1 = exp_conjugate(l_op, f, tol=tol)
    df = f.omega_derivative(omega)
    part2 = lie_transform(df, f, _w_int_plain, tol=tol)
    return part1 - part2
