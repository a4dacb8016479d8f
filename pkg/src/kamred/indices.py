"""Finite-support integer multi-indices and frequency vectors.

A multi-index labels one Fourier mode in the angle variables: site n >= 1
maps to the integer exponent of the angle phi_n.  Only nonzero exponents are
stored, as a sorted tuple of (site, exponent) pairs, so indices are hashable
and usable as dict keys.
"""

from __future__ import annotations

import math

from .errors import SmallDivisorError

# canonical empty index (l = 0)
ZERO = ()

MultiIndex = tuple  # tuple[tuple[int, int], ...], sorted by site, no zeros


def make_index(entries) -> MultiIndex:
    """Build a canonical multi-index from {site: exponent} or pair iterable."""
    if isinstance(entries, dict):
        items = entries.items()
    else:
        items = entries
    out = tuple(sorted((int(n), int(e)) for n, e in items if int(e) != 0))
    for n, _ in out:
        if n < 1:
            raise ValueError(f"frequency sites start at 1, got {n}")
    return out


def site_weight(n: int, eta: float) -> float:
    """<n>^eta with <n> := max(1, |n|)."""
    return float(max(1, abs(n))) ** eta


_WEIGHT_CACHE = {}


def index_weight(mi: MultiIndex, eta: float) -> float:
    """Weighted size |l|_eta = sum_n <n>^eta |l_n| (cached; indices recur)."""
    key = (mi, eta)
    w = _WEIGHT_CACHE.get(key)
    if w is None:
        w = sum(site_weight(n, eta) * abs(e) for n, e in mi)
        if len(_WEIGHT_CACHE) < 4_000_000:
            _WEIGHT_CACHE[key] = w
    return w


def index_l1(mi: MultiIndex) -> int:
    """||l||_1 = sum |l_n|."""
    return sum(abs(e) for _, e in mi)


def neg_index(mi: MultiIndex) -> MultiIndex:
    return tuple((n, -e) for n, e in mi)


def add_indices(a: MultiIndex, b: MultiIndex) -> MultiIndex:
    if not a:
        return b
    if not b:
        return a
    acc = dict(a)
    for n, e in b:
        s = acc.get(n, 0) + e
        if s == 0:
            acc.pop(n, None)
        else:
            acc[n] = s
    return tuple(sorted(acc.items()))


def divisor_weight(mi: MultiIndex, mu1: float, mu2: float) -> float:
    """prod_n (1 + <n>^mu1 |l_n|^mu2); off-support factors equal 1 exactly."""
    p = 1.0
    for n, e in mi:
        p *= 1.0 + site_weight(n, mu1) * abs(e) ** mu2
    return p


def kam_weight(mi: MultiIndex) -> float:
    """d(l) = prod_n (1 + |l_n|^4 <n>^4), the weight in the Melnikov bounds."""
    return divisor_weight(mi, 4.0, 4.0)


def enumerate_indices(lmax: float, sites, eta: float = 1.0,
                      include_zero: bool = False):
    """All multi-indices over `sites` with 0 < |l|_eta <= lmax, sorted.

    Exact enumeration, no duplicates; lexicographic order in the canonical
    tuple representation.  `include_zero` adds l = 0 in front.
    """
    sites = sorted(set(int(s) for s in sites))
    out = []

    def rec(pos, current, weight_left):
        if pos == len(sites):
            if current:
                out.append(tuple(sorted(current)))
            return
        n = sites[pos]
        w = site_weight(n, eta)
        emax = int(math.floor(weight_left / w + 1e-12))
        for e in range(-emax, emax + 1):
            nxt = current + [(n, e)] if e != 0 else current
            rec(pos + 1, nxt, weight_left - w * abs(e))

    rec(0, [], float(lmax))
    out.sort()
    if include_zero:
        return [ZERO] + out
    return out


class Frequency:
    """Frequency vector omega with finitely many active sites in [1, 2].

    gamma and mu parametrize the Diophantine condition
    |omega . l| > gamma * prod_n 1/(1 + |l_n|^mu <n>^mu).
    """

    def __init__(self, components, gamma=0.05, mu=2.0, active_sites=None):
        self.components = {int(n): float(v) for n, v in dict(components).items()}
        for n, v in self.components.items():
            if n < 1:
                raise ValueError(f"site {n} < 1")
            if not (1.0 <= v <= 2.0):
                raise ValueError(f"omega_{n} = {v} outside the cube [1, 2]")
        self.active_sites = (sorted(self.components) if active_sites is None
                             else sorted(int(s) for s in active_sites))
        self.gamma = float(gamma)
        self.mu = float(mu)

    def __repr__(self):
        return f"Frequency({self.components}, gamma={self.gamma}, mu={self.mu})"

    def dot(self, mi: MultiIndex) -> float:
        """omega . l, exact over the common finite support."""
        return sum(self.components.get(n, 0.0) * e for n, e in mi)

    def sup_norm(self) -> float:
        return max(self.components.values(), default=0.0)

    def diophantine_floor(self, mi: MultiIndex) -> float:
        """gamma * prod 1/(1 + |l_n|^mu <n>^mu) for this l."""
        return self.gamma / divisor_weight(mi, self.mu, self.mu)

    def check_divisor(self, mi: MultiIndex) -> float:
        """Return omega . l after checking it clears the Diophantine floor."""
        d = self.dot(mi)
        floor = self.diophantine_floor(mi)
        if abs(d) <= floor:
            raise SmallDivisorError(
                f"|omega.l| = {abs(d):.3e} <= floor {floor:.3e} at l = {mi}",
                index=mi, divisor=d, floor=floor)
        return d

    def as_vector(self, sites):
        return [self.components.get(n, 0.0) for n in sites]
