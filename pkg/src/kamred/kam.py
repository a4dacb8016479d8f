"""Iterative block-diagonalization of i D + P with 2x2 Melnikov superoperators.

One rung of the ladder maps (D_n, P_n) to (D_{n+1}, P_{n+1}) by solving the
block homological equation

    -omega . d_phi F + [i D_n, F] + Pi_N P_n = [P_hat_n(0)]

and pushing forward; the new remainder is assembled from the closed Lie-series
form of the two tau-integrals (no quadrature).  The divisors are controlled by
the second Melnikov conditions ||O^{-1}|| <= d(l)/gamma (off-diagonal blocks)
and <= d(l) <j>^2 / gamma (diagonal blocks, l != 0).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import CertificateError, OmegaExcludedError
from .indices import ZERO, index_weight, kam_weight
from .operators import (QPOp, get_block, hs_norm, lie_transform,
                        melnikov_inverse_norm, op_exponential, set_block,
                        sylvester_solve_block, _w_int_oneminus, _w_int_plain)

EXP_CERT_RHO_CAP = 1.0  # certificate width-loss cap; see design notes


def sigma_schedule(sigma0, n):
    """sigma_n = sigma_0 (1 - (1/4pi) sum_{j<=n} j^-2), strictly decreasing."""
    s = sum(1.0 / j ** 2 for j in range(1, n + 1))
    return sigma0 * (1.0 - s / (4.0 * math.pi))


def cutoff_schedule(n0, chi, n):
    """N_n = <n>^3 chi^n N_0."""
    return max(1, n) ** 3 * chi ** n * n0


def initial_blocks(lam2, lam1, lam0, lam_m1, jmax):
    """D_0(j) = diag(mu_j, mu_-j) with mu_{+-j} from the four lambdas."""
    blocks = {0: np.array([[lam0]], dtype=complex)}
    for j in range(1, jmax + 1):
        mu_p = -lam2 * j ** 2 + lam1 * j + lam0 - lam_m1 / j
        mu_m = -lam2 * j ** 2 - lam1 * j + lam0 + lam_m1 / j
        blocks[j] = np.diag([mu_p, mu_m]).astype(complex)
    return blocks


def blocks_to_matrix(blocks, jmax):
    dim = 2 * jmax + 1
    m = np.zeros((dim, dim), dtype=complex)
    for j, b in blocks.items():
        set_block(m, j, j, b)
    return m


@dataclass
class KamState:
    n: int
    blocks: dict            # j -> hermitian block of D_n
    p: QPOp                 # remainder, order -2, skew-adjoint
    sigma: float
    sigma0: float
    chi: float
    n0: float
    f_list: list = field(default_factory=list)
    log: list = field(default_factory=list)

    def d_matrix(self):
        return blocks_to_matrix(self.blocks, self.p.jmax)

    def d_op(self):
        return QPOp({ZERO: self.d_matrix()}, jmax=self.p.jmax,
                    sigma=self.sigma, eta=self.p.eta, lmax=self.p.lmax,
                    order=2.0)


@dataclass
class SpectrumReport:
    j_values: list
    mu_plus: list
    mu_minus: list
    mu0: float
    fit: dict               # coefficients of the least-squares model
    model_plus: list
    model_minus: list
    residual_plus: list     # scaled residuals j^2 (mu - model)
    residual_minus: list
    sign_note: str = ""


def kam_init(reg, chi=1.5, n0=8.0) -> KamState:
    """Assemble D_0 from the regularized form's lambdas; P_0 is its remainder."""
    sigma0 = reg.sigma_final * 8.0 / 9.0  # sigma_bar / 2 given the 7/16 schedule
    blocks = initial_blocks(reg.lam2, reg.lam1, reg.lam0, reg.lam_m1, reg.jmax)
    p0 = reg.r7.copy()
    p0.sigma = sigma0
    return KamState(n=0, blocks=blocks, p=p0, sigma=sigma0, sigma0=sigma0,
                    chi=chi, n0=n0)


def melnikov_check(state: KamState, omega, mi, j, jp):
    """Margin ratio of one Melnikov condition; > 1 means it holds.

    Off-diagonal blocks compare ||O^{-1}|| with d(l)/gamma; diagonal blocks
    (l != 0) with d(l) <j>^2 / gamma.
    """
    x = omega.dot(mi)
    inv = melnikov_inverse_norm(x, state.blocks[j], state.blocks[jp])
    if j != jp:
        bound = kam_weight(mi) / omega.gamma
    else:
        if mi == ZERO:
            return math.inf
        bound = kam_weight(mi) * max(1, j) ** 2 / omega.gamma
    if inv == math.inf:
        return 0.0
    return bound / inv


def solve_block_homological(state: KamState, omega, n_cut=None):
    """Solve the homological equation on stored blocks with |l|_eta <= N.

    Fails with OmegaExcludedError naming the first (l, j, j') whose Melnikov
    margin is below 1: this is how the Cantor-set exclusion surfaces at run
    time.
    """
    p = state.p
    J = p.jmax
    gamma = omega.gamma
    eigs = {j: np.linalg.eigh(np.atleast_2d(b))
            for j, b in state.blocks.items()}
    labels = {}
    pmax = max((float(np.abs(m).max()) for m in p.labels.values()),
               default=0.0)
    cut = 0.0 if pmax == 0.0 else 1e-30 * pmax
    for mi, mat in sorted(p.labels.items()):
        if n_cut is not None and index_weight(mi, p.eta) > n_cut + 1e-12:
            continue
        x = omega.dot(mi)
        dl = kam_weight(mi)
        out = np.zeros_like(mat)
        for j in range(J + 1):
            for jp in range(J + 1):
                if mi == ZERO and j == jp:
                    continue  # removed by the block-diagonal correction Z_n
                blk = get_block(mat, j, jp)
                if not np.any(np.abs(blk) > cut):
                    continue
                floor = gamma / dl if j != jp else \
                    gamma / (dl * max(1, j) ** 2)
                lam, u = eigs[j]
                mu, v = eigs[jp]
                g = u.conj().T @ (1j * blk) @ v
                den = -x + lam[:, None] - mu[None, :]
                mind = float(np.abs(den).min())
                if mind < floor:
                    raise OmegaExcludedError(
                        f"Melnikov margin failed at l={mi}, (j, j')="
                        f"({j}, {jp}): divisor {mind:.3e} < floor "
                        f"{floor:.3e}", triple=(mi, j, jp),
                        margin=mind / floor)
                f_blk = u @ (g / den) @ v.conj().T
                set_block(out, j, jp, f_blk)
        if np.any(out):
            labels[mi] = out
    f = QPOp(labels, jmax=J, sigma=p.sigma, eta=p.eta, lmax=p.lmax, order=0.0)
    return f


def homological_residual(state: KamState, omega, f: QPOp, n_cut):
    """|| -omega.dF + [iD, F] + Pi_N P - [P_hat(0)] || relative to |P|."""
    d_op = 1j * state.d_op()
    p_low, _ = state.p.uv_project(n_cut)
    z0 = QPOp({ZERO: state.p.zero_label_block_diag()}, jmax=state.p.jmax,
              sigma=state.p.sigma, eta=state.p.eta, lmax=state.p.lmax)
    res = (-1.0) * f.omega_derivative(omega) + (d_op @ f - f @ d_op) \
        + p_low - z0
    pn = state.p.decay_norm(m=0.0)
    if pn == 0.0:
        return 0.0
    return res.decay_norm(m=0.0) / pn


def kam_step(state: KamState, omega, series_tol=1e-14) -> KamState:
    """One rung: new block-diagonal part and the closed-form new remainder."""
    t0 = time.perf_counter()
    n = state.n
    n_cut = cutoff_schedule(state.n0, state.chi, n)
    sigma_next = sigma_schedule(state.sigma0, n + 1)

    f = solve_block_homological(state, omega, n_cut=n_cut)

    # new block-diagonal part: Z_n = (1/i) [P_hat(0)]
    z_mat = state.p.zero_label_block_diag() / 1j
    blocks = {}
    z_shift = 0.0
    for j, b in state.blocks.items():
        zb = get_block(z_mat, j, j)
        herm_defect = hs_norm(zb - zb.conj().T)
        if herm_defect > 1e-10 * max(1.0, hs_norm(zb)):
            raise CertificateError(
                f"Z_n({j}) not hermitian: defect {herm_defect:.3e}")
        zb = 0.5 * (zb + zb.conj().T)
        blocks[j] = b + zb
        z_shift = max(z_shift, hs_norm(zb))

    p_low, p_high = state.p.uv_project(n_cut)
    z0_op = QPOp({ZERO: state.p.zero_label_block_diag()}, jmax=state.p.jmax,
                 sigma=state.p.sigma, eta=state.p.eta, lmax=state.p.lmax)
    y1 = z0_op - p_low
    br1 = (y1 @ f - f @ y1).prune()
    br2 = (state.p @ f - f @ state.p).prune()
    i1 = lie_transform(br1, f, _w_int_oneminus, tol=series_tol)
    i2 = lie_transform(br2, f, _w_int_plain, tol=series_tol)
    p_next = (p_high + i1 + i2).prune()
    p_next.order = -2.0
    p_next.sigma = sigma_next

    skew = p_next.skew_defect()
    pmax = max((float(np.abs(m).max()) for m in p_next.labels.values()),
               default=0.0)
    if skew > 1e-9 * max(1e-30, pmax):
        raise CertificateError(
            f"P_{n + 1} lost skew-adjointness: defect {skew:.3e}")

    new = KamState(n=n + 1, blocks=blocks, p=p_next, sigma=sigma_next,
                   sigma0=state.sigma0, chi=state.chi, n0=state.n0,
                   f_list=state.f_list + [f], log=list(state.log))
    new.log.append({
        "n": n + 1,
        "sigma_n": sigma_next,
        "N_n": n_cut,
        "P_norm": p_next.decay_norm(sigma_next, -2.0),
        "D_shift_max": z_shift,
        "F_norm": f.decay_norm(m=0.0),
        "wall_ms": 1000.0 * (time.perf_counter() - t0),
    })
    return new


@dataclass
class KamResult:
    state: KamState
    psi: QPOp
    psi_inv: QPOp
    spectrum: SpectrumReport
    p_norms: list
    unitarity_defect: float
    conjugation_residual: float
    initial_scale: float
    stopped_reason: str


def compose_transformations(state: KamState, rho_cap=EXP_CERT_RHO_CAP):
    """Psi_n = exp(F_1) ... exp(F_n) and its inverse, on the truncation."""
    if not state.f_list:
        jm = state.p.jmax
        ident = QPOp.identity(jm, sigma=state.sigma, eta=state.p.eta,
                              lmax=state.p.lmax)
        return ident, ident
    psi = None
    psi_inv = None
    for f in state.f_list:
        rho = min(rho_cap, f.sigma)
        phi = op_exponential(f, rho=rho)
        phi_inv = op_exponential(-1.0 * f, rho=rho)
        psi = phi if psi is None else psi @ phi
        psi_inv = phi_inv if psi_inv is None else phi_inv @ psi_inv
    return psi, psi_inv


def conjugation_residual(reg_op: QPOp, omega, psi: QPOp, psi_inv: QPOp,
                         d_blocks, jmax):
    """|Psi^{-1} L0 Psi - Psi^{-1} (om.d Psi) - i D| at order-0 weight."""
    d_end = QPOp({ZERO: 1j * blocks_to_matrix(d_blocks, jmax)},
                 jmax=jmax, sigma=psi.sigma, eta=psi.eta, lmax=psi.lmax)
    conj = psi_inv @ (reg_op @ psi) - psi_inv @ psi.omega_derivative(omega)
    return (conj - d_end).decay_norm(m=0.0)


def kam_run(reg, omega, chi=1.5, n0=8.0, stop=1e-12, n_max=8,
            keep_transforms=True) -> KamResult:
    """Iterate until |P_n| < stop (relative) or n = n_max; verify the result.

    Returns final blocks, composed transformations, the spectrum report and
    the per-step contraction log.
    """
    state = kam_init(reg, chi=chi, n0=n0)
    p0_norm = state.p.decay_norm(state.sigma, -2.0)
    p_norms = [p0_norm]
    state.log.append({"n": 0, "sigma_n": state.sigma,
                      "N_n": cutoff_schedule(n0, chi, 0),
                      "P_norm": p0_norm, "D_shift_max": 0.0,
                      "F_norm": 0.0, "wall_ms": 0.0})
    reason = "n_max reached"
    for _ in range(n_max):
        if not state.p.labels or p_norms[-1] <= stop * max(p0_norm, 1e-300):
            reason = "remainder below stop threshold"
            break
        state = kam_step(state, omega)
        p_norms.append(state.log[-1]["P_norm"])
        if p_norms[-1] > 10.0 * p_norms[-2] > 0:
            raise CertificateError(
                f"contraction failure at step {state.n}: "
                f"|P| grew from {p_norms[-2]:.3e} to {p_norms[-1]:.3e}")
    else:
        reason = "n_max reached"

    spectrum = fit_spectrum(state.blocks, reg.jmax)
    if keep_transforms:
        psi, psi_inv = compose_transformations(state)
        ident = QPOp.identity(reg.jmax, sigma=psi.sigma, eta=psi.eta,
                              lmax=psi.lmax)
        unit = (psi.adjoint() @ psi - ident).decay_norm(m=0.0)
        reg_op = reg.final_symbol_operator().materialize()
        reg_op.sigma = state.sigma0
        scale = reg_op.decay_norm(m=0.0)
        resid = conjugation_residual(reg_op, omega, psi, psi_inv,
                                     state.blocks, reg.jmax)
    else:
        psi = psi_inv = None
        unit = float("nan")
        resid = float("nan")
        scale = float("nan")
    return KamResult(state=state, psi=psi, psi_inv=psi_inv, spectrum=spectrum,
                     p_norms=p_norms, unitarity_defect=unit,
                     conjugation_residual=resid, initial_scale=scale,
                     stopped_reason=reason)


def lip_gamma_estimates(run_a, run_b, omega_a, omega_b, gamma):
    """Lip-gamma norms by finite differences across a sampled omega pair.

    For each common step n: sup-part max(|P_n(a)|, |P_n(b)|) plus
    gamma * |P_n(a) - P_n(b)| / ||omega_a - omega_b||_inf, and the analogous
    blockwise estimate for the D_n(j) corrections (here at the final step).
    """
    dw = max(abs(omega_a.components.get(n, 0.0)
                 - omega_b.components.get(n, 0.0))
             for n in set(omega_a.components) | set(omega_b.components))
    if dw == 0.0:
        raise ValueError("need two distinct frequencies")
    rows = []
    for ra, rb in zip(run_a.state.log, run_b.state.log):
        sup = max(ra["P_norm"], rb["P_norm"])
        lip = abs(ra["P_norm"] - rb["P_norm"]) / dw
        rows.append({"n": ra["n"], "sup": sup, "lip": lip,
                     "lip_gamma": sup + gamma * lip})
    block_lip = 0.0
    for j in run_a.state.blocks:
        diff = hs_norm(np.atleast_2d(run_a.state.blocks[j])
                       - np.atleast_2d(run_b.state.blocks[j]))
        block_lip = max(block_lip, diff / dw)
    return {"steps": rows, "block_lip": block_lip, "domega": dw}


def contraction_base(p_norms, n_lo=2, n_hi=6):
    """Mean of log|P_{n+1}| / log|P_n| over the requested window."""
    ratios = []
    for n in range(n_lo, min(n_hi, len(p_norms) - 1)):
        a, b = p_norms[n], p_norms[n + 1]
        if a <= 0 or b <= 0 or a >= 1 or b >= 1:
            continue
        ratios.append(math.log(b) / math.log(a))
    if not ratios:
        return float("nan")
    return sum(ratios) / len(ratios)


def _branch_eigs(block):
    """Eigenvalues labelled by dominant basis vector: (+j row first)."""
    b = np.atleast_2d(block)
    if b.shape == (1, 1):
        v = float(b[0, 0].real)
        return v, v
    w, vecs = np.linalg.eigh(b)
    if abs(vecs[0, 0]) >= abs(vecs[0, 1]):
        return float(w[0].real), float(w[1].real)
    return float(w[1].real), float(w[0].real)


def fit_spectrum(blocks, jmax, j_lo=None) -> SpectrumReport:
    """Least-squares fit mu_j^s ~ A j^2 + s B j + C + s D / j over j in
    [jmax/2, jmax]; scaled residuals are j^2 (mu - model).

    The stored blocks carry -lam2 j^2 while the asymptotic display uses
    +lam2 j^2; the report keeps the fitted A and flags the sign rather than
    resolving the convention.
    """
    if j_lo is None:
        j_lo = max(1, jmax // 2)
    j_all = list(range(1, jmax + 1))
    mu_p, mu_m = [], []
    for j in j_all:
        p, m = _branch_eigs(blocks[j])
        mu_p.append(p)
        mu_m.append(m)
    rows, rhs = [], []
    for j in range(j_lo, jmax + 1):
        for s, mu in ((1.0, mu_p[j - 1]), (-1.0, mu_m[j - 1])):
            rows.append([j ** 2, s * j, 1.0, s / j])
            rhs.append(mu)
    coef, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
    a, b, c, d = (float(x) for x in coef)
    model_p = [a * j ** 2 + b * j + c + d / j for j in j_all]
    model_m = [a * j ** 2 - b * j + c - d / j for j in j_all]
    res_p = [j ** 2 * (mu - mo) for j, mu, mo in zip(j_all, mu_p, model_p)]
    res_m = [j ** 2 * (mu - mo) for j, mu, mo in zip(j_all, mu_m, model_m)]
    fit = {"A": a, "B": b, "C": c, "D": d,
           "lambda2": -a, "lambda1": b, "lambda0": c, "lambda_m1": -d}
    return SpectrumReport(
        j_values=j_all, mu_plus=mu_p, mu_minus=mu_m,
        mu0=float(np.atleast_2d(blocks[0])[0, 0].real), fit=fit,
        model_plus=model_p, model_minus=model_m,
        residual_plus=res_p, residual_minus=res_m,
        sign_note="blocks store -lambda2 j^2; asymptotic display uses "
                  "+lambda2 j^2; fit reports both signs")


def residual_slope(report: SpectrumReport, j_lo=8, j_hi=None):
    """Log-log slope of the unscaled residual |mu - model| over [j_lo, j_hi]."""
    xs, ys = [], []
    for j, rp, rm in zip(report.j_values, report.residual_plus,
                         report.residual_minus):
        if j < j_lo or (j_hi is not None and j > j_hi):
            continue
        r = max(abs(rp), abs(rm)) / j ** 2
        if r > 1e-300:
            xs.append(math.log(j))
            ys.append(math.log(r))
    if len(xs) < 3:
        return float("nan")
    xs, ys = np.array(xs), np.array(ys)
    return float(np.polyfit(xs, ys, 1)[0])
