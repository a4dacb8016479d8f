"""Shared fixtures: deterministic random instances and a session pipeline run."""

import math

import numpy as np
import pytest

from kamred.config import REFERENCE_CONFIG, RunConfig
from kamred.fourier import Fun
from kamred.indices import enumerate_indices
from kamred.kam import kam_run
from kamred.operators import QPOp
from kamred.regularization import regularize


def random_scalar(rng, sites=(1, 2), lmax=4.0, sigma=0.6, eta=1.0,
                  density=0.5, scale=1.0, real=False, zero_average=False):
    """Sparse random angle-only function with width-decayed coefficients."""
    indices = enumerate_indices(lmax, sites, eta=eta, include_zero=True)
    coeffs = {}
    from kamred.indices import index_weight, neg_index
    for mi in indices:
        if rng.random() > density:
            continue
        w = index_weight(mi, eta)
        c = (rng.standard_normal() + 1j * rng.standard_normal()) \
            * scale * math.exp(-sigma * w)
        coeffs[(mi, 0)] = coeffs.get((mi, 0), 0j) + c
        if real:
            coeffs[(neg_index(mi), 0)] = coeffs.get((neg_index(mi), 0), 0j) \
                + c.conjugate()
    if zero_average:
        coeffs.pop(((), 0), None)
    return Fun(coeffs, sigma=sigma, eta=eta, lmax=lmax)


def random_field(rng, sites=(1, 2), lmax=4.0, jmax=6, sigma=0.6, eta=1.0,
                 density=0.35, scale=1.0, real=False):
    indices = enumerate_indices(lmax, sites, eta=eta, include_zero=True)
    from kamred.indices import index_weight, neg_index
    coeffs = {}
    for mi in indices:
        for k in range(-jmax, jmax + 1):
            if rng.random() > density:
                continue
            w = index_weight(mi, eta) + abs(k)
            c = (rng.standard_normal() + 1j * rng.standard_normal()) \
                * scale * math.exp(-sigma * w)
            coeffs[(mi, k)] = coeffs.get((mi, k), 0j) + c
            if real:
                coeffs[(neg_index(mi), -k)] = \
                    coeffs.get((neg_index(mi), -k), 0j) + c.conjugate()
    return Fun(coeffs, sigma=sigma, eta=eta, jmax=jmax, lmax=lmax)


def random_qpop(rng, sites=(1,), lmax=3.0, jmax=6, sigma=0.5, eta=1.0,
                order=0.0, scale=1e-2, band=0.8, n_labels=4, skew=False):
    """Random banded operator family; skew selects R_hat(l)^* = -R_hat(-l)."""
    from kamred.indices import neg_index
    indices = enumerate_indices(lmax, sites, eta=eta, include_zero=True)
    chosen = [indices[i] for i in
              rng.choice(len(indices), size=min(n_labels, len(indices)),
                         replace=False)]
    dim = 2 * jmax + 1
    k = np.arange(-jmax, jmax + 1)
    prof = np.exp(-band * np.abs(k[:, None] - k[None, :]))
    if order:
        prof = prof * np.maximum(np.abs(k)[None, :], 1.0) ** float(order)
    labels = {}
    for mi in chosen:
        m = scale * (rng.standard_normal((dim, dim))
                     + 1j * rng.standard_normal((dim, dim))) * prof
        labels[mi] = labels.get(mi, 0) + m
        if skew:
            labels[neg_index(mi)] = labels.get(neg_index(mi), 0) \
                - m.conj().T
    return QPOp(labels, jmax=jmax, sigma=sigma, eta=eta, order=order)


def reference_cfg(jmax=16, lmax=6.0, eps=1e-3):
    import json
    raw = json.loads(json.dumps(REFERENCE_CONFIG))
    raw["jmax"] = jmax
    raw["lmax"] = lmax
    raw["eps"] = eps
    return RunConfig.from_dict(raw)


@pytest.fixture(scope="session")
def small_pipeline():
    """Reference physics at J=16, L=6: regularized form + omega."""
    cfg = reference_cfg()
    inp = cfg.build_input()
    reg = regularize(inp)
    return {"cfg": cfg, "inp": inp, "reg": reg, "omega": inp.omega}


@pytest.fixture(scope="session")
def small_kam(small_pipeline):
    reg = small_pipeline["reg"]
    omega = small_pipeline["omega"]
    res = kam_run(reg, omega, chi=1.5, n0=8.0, stop=1e-60, n_max=8)
    return {"res": res, **small_pipeline}


@pytest.fixture(scope="session")
def reference_pipeline():
    """Full reference configuration at J=32 (shared by acceptance tests)."""
    cfg = reference_cfg(jmax=32, lmax=8.0)
    inp = cfg.build_input()
    reg = regularize(inp)
    res = kam_run(reg, inp.omega, chi=1.5, n0=8.0, stop=1e-60, n_max=8)
    return {"cfg": cfg, "inp": inp, "reg": reg, "omega": inp.omega,
            "kam": res}
