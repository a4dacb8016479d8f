"""Acceptance criteria, one test per criterion, one printed verdict line each.

Criterion 5's contraction-base clause is implemented exactly as specified and
is expected to fail at desk scale: the truncated iteration converges
quadratically, so the log-ratio base approaches 2 from above; see the
decisions ledger for the full analysis.  Everything else is expected green.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import random_scalar, reference_cfg
from kamred.diophantine import (calibrate_tau, exact_failing_measure_d1,
                                measure_monte_carlo, series_partial_sums,
                                small_divisor_sup, sup_bound)
from kamred.evolution import (ReducedFlow, direct_snapshots, evolve_direct,
                              evolve_reduced, gaussian_packet, l2_norm,
                              transform_norm_constants)
from kamred.fourier import Fun, compose_angle_shift, invert_angle_shift
from kamred.indices import Frequency, make_index
from kamred.kam import (KamState, contraction_base, homological_residual,
                        initial_blocks, kam_run, residual_slope,
                        solve_block_homological)
from kamred.regularization import regularize


def _verdict(num, ok, detail):
    print(f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


@pytest.fixture(scope="session")
def spectrum_run():
    """Wide-truncation run for the eigenvalue asymptotics (fit window
    [24, 48] keeps j in [8, 32] interior)."""
    cfg = reference_cfg(jmax=48, lmax=8.0)
    inp = cfg.build_input()
    reg = regularize(inp)
    res = kam_run(reg, inp.omega, chi=1.5, n0=8.0, stop=1e-40, n_max=6,
                  keep_transforms=False)
    return {"reg": reg, "res": res, "inp": inp}


def test_criterion_01_homological_round_trips():
    t0 = time.time()
    rng = np.random.default_rng(101)
    om = Frequency({1: 1.319, 2: 1.577, 3: 1.871, 4: 1.135}, gamma=0.005)
    worst = 0.0
    for _ in range(100):  # scalar round trips
        f = random_scalar(rng, sites=(1, 2, 3, 4), lmax=6.0, sigma=0.5,
                          density=0.25, zero_average=True)
        u = f.solve_homological(om)
        back = u.omega_derivative(om)
        err = (back - f).norm(0.0) / max(f.norm(0.0), 1e-30)
        worst = max(worst, err)
    for _ in range(100):  # block homological equations
        jmax = int(rng.integers(4, 17))
        lam = (1.0 + 1e-3 * rng.standard_normal(),
               1e-3 * rng.standard_normal(), 1e-3 * rng.standard_normal(),
               1e-3 * rng.standard_normal())
        blocks = initial_blocks(*lam, jmax)
        from conftest import random_qpop
        p = random_qpop(rng, sites=(1, 2), lmax=4.0, jmax=jmax, sigma=0.5,
                        order=-2.0, scale=1e-4, skew=True)
        st = KamState(n=0, blocks=blocks, p=p, sigma=0.5, sigma0=0.5,
                      chi=1.5, n0=8.0)
        f_op = solve_block_homological(st, om, n_cut=6.0)
        worst = max(worst, homological_residual(st, om, f_op, 6.0))
    dt = time.time() - t0
    _verdict(1, worst < 1e-11 and dt < 10.0,
             f"200 round trips, worst relative residual {worst:.2e}, "
             f"{dt:.1f}s")


def test_criterion_02_norm_lemmas():
    t0 = time.time()
    rng = np.random.default_rng(202)
    om = Frequency({1: 1.9, 2: 1.3, 3: 1.6})
    viol = 0
    for _ in range(500):  # submultiplicativity
        u = random_scalar(rng, sites=(1, 2, 3), lmax=3.0, density=0.4)
        v = random_scalar(rng, sites=(1, 2, 3), lmax=3.0, density=0.4)
        if (u * v).norm() > u.norm() * v.norm() * (1 + 1e-12):
            viol += 1
    for _ in range(500):  # projector tail
        u = random_scalar(rng, sites=(1, 2), lmax=5.0, sigma=0.9)
        n_cut = float(rng.uniform(0, 5))
        rho = float(rng.uniform(0.05, 0.4))
        _, high = u.project_uv(n_cut)
        if high.norm(u.sigma - rho) > \
                math.exp(-rho * n_cut) * u.norm() * (1 + 1e-12):
            viol += 1
    for _ in range(500):  # Cauchy estimate
        u = random_scalar(rng, sites=(1, 2, 3), lmax=4.0, sigma=0.8)
        rho = float(rng.uniform(0.05, 0.5))
        lhs = u.omega_derivative(om).norm(u.sigma - rho)
        if lhs > 1.01 * om.sup_norm() / (math.e * rho) * u.norm():
            viol += 1
    from conftest import random_qpop
    c0 = {0: 1.0 + 1e-12, 1: 2.01, 2: 6.0}
    for _ in range(500):  # B^{sigma, m} composition bound
        m = int(rng.integers(-2, 3))
        mp = int(rng.integers(-1, 2))
        rho = float(rng.uniform(0.1, 0.4))
        r = random_qpop(rng, jmax=5, sigma=0.5, order=float(m))
        q = random_qpop(rng, jmax=5, sigma=0.5 + rho, order=float(mp))
        lhs = (r @ q).decay_norm(0.5, m + mp)
        rhs = c0[abs(m)] * rho ** (-abs(m)) * r.decay_norm(0.5, m) \
            * q.decay_norm(0.5 + rho, mp)
        if lhs > rhs * (1 + 1e-10):
            viol += 1
    dt = time.time() - t0
    _verdict(2, viol == 0 and dt < 30.0,
             f"4 x 500 instances, {viol} violations, {dt:.1f}s")


def test_criterion_03_diffeo_inversion():
    rng = np.random.default_rng(303)
    om = Frequency({1: 1.4, 2: 1.1})
    worst_sup = 0.0
    for _ in range(50):
        alpha = random_scalar(rng, sites=(1, 2), lmax=2.0, sigma=1.2,
                              scale=0.004, real=True)
        alpha.lmax = 8.0
        at = invert_angle_shift(om, alpha, rho=0.3)
        u = random_scalar(rng, sites=(1, 2), lmax=2.0, sigma=2.0)
        u.lmax = 8.0
        fwd = compose_angle_shift(u, om, alpha, sigma_out=1.2)
        back = compose_angle_shift(fwd, om, at, sigma_out=0.5)
        worst_sup = max(worst_sup, (back - u).sup_bound())
    # one-angle grid oracle: alpha = 0.05 sin(phi)
    om1 = Frequency({1: 1.0})
    alpha = Fun.scalar({make_index({1: 1}): -0.025j,
                        make_index({1: -1}): 0.025j}, sigma=1.5)
    at = invert_angle_shift(om1, alpha, rho=0.4)
    worst_grid = 0.0
    for theta in np.linspace(0, 2 * math.pi, 41, endpoint=False):
        phi = theta
        for _ in range(200):
            phi = theta - 0.05 * math.sin(phi)
        worst_grid = max(worst_grid,
                         abs(at.evaluate({1: theta}).real - (phi - theta)))
    _verdict(3, worst_sup < 1e-10 and worst_grid < 1e-8,
             f"50 shifts, sup round-trip {worst_sup:.2e}, grid oracle "
             f"{worst_grid:.2e}")


def test_criterion_04_regularization_structure(reference_pipeline):
    reg = reference_pipeline["reg"]
    cfg = reference_pipeline["cfg"]
    eps = cfg.eps
    worst = max(max(r["residuals"].values()) for r in reg.reports)
    base_ratio = reg.r7.decay_norm(reg.sigma_final, -2.0) / eps

    cfg_half = reference_cfg(jmax=32, lmax=8.0, eps=eps / 2)
    reg_half = regularize(cfg_half.build_input())
    half_ratio = reg_half.r7.decay_norm(reg_half.sigma_final, -2.0) / (eps / 2)

    cfg_big = reference_cfg(jmax=64, lmax=8.0, eps=eps)
    reg_big = regularize(cfg_big.build_input())
    big_ratio = reg_big.r7.decay_norm(reg_big.sigma_final, -2.0) / eps

    eps_stable = abs(half_ratio - base_ratio) <= 0.25 * max(half_ratio,
                                                            base_ratio)
    j_stable = abs(big_ratio - base_ratio) <= 0.25 * max(big_ratio,
                                                         base_ratio)
    ok = worst < 1e-11 and eps_stable and j_stable
    _verdict(4, ok,
             f"structural residuals {worst:.2e}; |R7|/eps = "
             f"{base_ratio:.4f} (eps/2: {half_ratio:.4f}, J=64: "
             f"{big_ratio:.4f})")


def test_criterion_05_kam_contraction(reference_pipeline):
    t0 = time.time()
    res = reference_pipeline["kam"]
    base = contraction_base(res.p_norms, 2, 6)
    resid_ok = res.conjugation_residual < 1e-9 * res.initial_scale
    unit_ok = res.unitarity_defect < 1e-9
    base_ok = 1.2 < base < 2.0
    dt = time.time() - t0
    detail = (f"base {base:.3f} (window (1.2, 2.0)); conjugation residual "
              f"{res.conjugation_residual:.2e} vs 1e-9 * scale "
              f"{res.initial_scale:.1f}; unitarity "
              f"{res.unitarity_defect:.2e}; P = "
              f"{['%.1e' % p for p in res.p_norms]}")
    if resid_ok and unit_ok and not base_ok:
        detail += (" -- base clause outside the window: quadratic (Newton) "
                   "regime at desk scale, see decisions ledger")
    _verdict(5, base_ok and resid_ok and unit_ok, detail)


def test_criterion_06_eigenvalue_asymptotics(spectrum_run):
    sp = spectrum_run["res"].spectrum
    eps = spectrum_run["inp"].eps
    scaled = [max(abs(sp.residual_plus[j - 1]), abs(sp.residual_minus[j - 1]))
              for j in range(8, 33)]
    bounded = max(scaled) <= eps
    slope = residual_slope(sp, j_lo=8, j_hi=32)
    ok = bounded and slope <= -2.0 + 0.3
    _verdict(6, ok,
             f"max scaled residual {max(scaled):.2e} (<= eps), log-log "
             f"slope {slope:.2f} (<= -1.7)")


def test_criterion_07_measure_law():
    t0 = time.time()
    gammas = [0.1, 0.05, 0.025]
    rows = measure_monte_carlo(3, gammas, 4.0, 10000, seed=777)
    fracs = [r["fraction"] for r in rows]
    slope = sum(f * g for f, g in zip(fracs, gammas)) / \
        sum(g * g for g in gammas)
    point_ok = all(abs(f / g - slope) <= 0.3 * slope
                   for f, g in zip(fracs, gammas))
    exact = exact_failing_measure_d1(0.5, mu=2.0, lmax=3.0)
    d1 = measure_monte_carlo(1, [0.5], 3.0, 5000, seed=778)[0]
    d1_ok = abs(d1["fraction"] - exact) <= 3 * d1["stderr"]
    dt = time.time() - t0
    _verdict(7, point_ok and d1_ok and dt < 120.0,
             f"fractions {fracs} ~ C*gamma with C = {slope:.3f}; d=1 oracle "
             f"match; {dt:.1f}s")


def test_criterion_08_small_divisor_bounds():
    tau = calibrate_tau(1.0, 4.0, 4.0)
    ok_sup = True
    worst_margin = math.inf
    for rho in (0.05, 0.1, 0.2, 0.4):
        measured, _ = small_divisor_sup(rho, 4.0, 4.0, 8.0, (1, 2, 3))
        bound = sup_bound(rho, tau)
        worst_margin = min(worst_margin, bound / measured)
        ok_sup = ok_sup and measured <= bound
    sums, incs = series_partial_sums(4.0, 4.0, [2.0, 4.0, 6.0, 8.0],
                                     (1, 2, 3))
    cauchy = all(a >= b >= 0 for a, b in zip(incs[1:], incs[2:]))
    _verdict(8, ok_sup and cauchy,
             f"tau = {tau}, worst bound margin x{worst_margin:.1f}; series "
             f"increments {['%.3f' % i for i in incs]}")


def test_criterion_09_dynamics(reference_pipeline):
    cfg = reference_pipeline["cfg"]
    inp = reference_pipeline["inp"]
    reg = reference_pipeline["reg"]
    res = reference_pipeline["kam"]
    omega = reference_pipeline["omega"]
    jmax = cfg.jmax
    u0 = gaussian_packet(jmax)
    t_final, dt = 10.0, 1e-3
    times = [1.25 * k for k in range(1, 9)]

    _, states, block_drift = evolve_reduced(reg, res, omega, u0, times)
    snaps = direct_snapshots(inp, u0, times, dt=dt)
    p_fin = res.p_norms[-1]
    diffs = [l2_norm(a - b) for a, b in zip(snaps, states)]
    budgets = [50.0 * (p_fin * t + inp.eps * dt ** 2 * t + 1e-11)
               for t in times]
    budget_ok = all(d <= b for d, b in zip(diffs, budgets))

    flow = ReducedFlow(reg, res, omega)
    consts = transform_norm_constants(flow, [0.0, 2.5, 5.0, 10.0])
    c_h1 = consts["hs"][1.0]
    c_an = consts["analytic"]
    trace_d, _ = evolve_direct(inp, u0, t_final, dt=dt, sample_every=2000)
    h1_ratio = max(trace_d.h1) / trace_d.h1[0]
    an_ratio = max(trace_d.analytic) / trace_d.analytic[0]
    ratio_ok = h1_ratio <= c_h1 ** 2 and an_ratio <= c_an ** 2 \
        and c_h1 < 2.0 and c_an < 2.0

    cfg0 = reference_cfg(jmax=16, lmax=6.0, eps=0.0)
    trace0, _ = evolve_direct(cfg0.build_input(), gaussian_packet(16), 2.0,
                              dt=1e-3)
    free_ok = all(
        max(abs(x / series[0] - 1.0) for x in series) < 1e-10
        for series in (trace0.l2, trace0.h1, trace0.h2, trace0.analytic))

    ok = budget_ok and ratio_ok and free_ok and block_drift < 1e-10
    _verdict(9, ok,
             f"max |direct - reduced| = {max(diffs):.2e} within budget "
             f"{budgets[-1]:.2e}; W-constants H1 {c_h1:.4f}, analytic "
             f"{c_an:.4f} (< 2); free-flow conservation "
             f"{'ok' if free_ok else 'violated'}")


def test_criterion_10_determinism(tmp_path):
    from kamred.cli import main
    raw = json.loads(json.dumps(
        __import__("kamred.config", fromlist=["REFERENCE_CONFIG"])
        .REFERENCE_CONFIG))
    raw["jmax"] = 10
    raw["lmax"] = 5.0
    raw["kam"] = {"chi": 1.5, "n0": 8.0, "stop": 1e-12, "n_max": 4}
    raw["evolve"] = {"t_final": 0.5, "dt": 1e-3, "sigma_eval": 0.25,
                     "n_samples": 4}
    raw["measure"] = {"d": 2, "gamma_list": [0.1, 0.05], "lmax": 3.0,
                      "samples": 2000}
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(json.dumps(raw))
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        rc = main(["all", "--config", str(cfgfile), "--out", str(out),
                   "--seed", "4242"])
        assert rc == 0
        outs.append(out)
    names_a = sorted(p.name for p in (outs[0] / "reports").glob("*"))
    names_b = sorted(p.name for p in (outs[1] / "reports").glob("*"))
    identical = names_a == names_b and all(
        (outs[0] / "reports" / n).read_bytes()
        == (outs[1] / "reports" / n).read_bytes() for n in names_a)
    _verdict(10, identical,
             f"two seeded runs, {len(names_a)} report files byte-identical: "
             f"{identical}")
