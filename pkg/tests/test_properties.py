"""Randomized property checks over coefficients, meshes and vectors."""
import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from mdlod.experiments import fit_rates
from mdlod.fem import CoefficientSet, assemble_operator, build_space, energy_norm, factorize_spd
from mdlod.geometry import load_geometry
from mdlod.lod import apply_Rl, build_basis, setup
from mdlod.mesh import build_hierarchy

GEOMS = {name: load_geometry(name) for name in ("square", "vertical", "cross")}
HIERS = {(g, nH, r): build_hierarchy(GEOMS[g], nH, r)
         for g in GEOMS for nH in (2, 4) for r in (2, 3)}

cases = st.tuples(st.sampled_from(sorted(HIERS)), st.integers(0, 2 ** 32 - 1))
settings.register_profile("lod", max_examples=15, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lod")


def _coeffs(h, seed):
    rng = np.random.default_rng(seed)
    n, ni = h.fine.n_cells, h.fine.n_iface
    return CoefficientSet(A0=rng.uniform(0.01, 1.0, n), A1=rng.uniform(0.1, 5.0, ni), B1=rng.uniform(0.1, 5.0, ni))


@given(cases)
def test_operator_symmetric_definite(case):
    key, seed = case
    h = HIERS[key]
    s = build_space(h.fine)
    A = assemble_operator(s, _coeffs(h, seed))
    M = A.matrix
    assert abs(M - M.T).max() <= 1e-14 * abs(M).max()
    assert np.abs(A.full @ np.ones(s.n_dofs)).max() <= 1e-12
    factorize_spd(M)


@given(cases)
def test_restricted_sum(case):
    key, seed = case
    h = HIERS[key]
    s = build_space(h.fine)
    c = _coeffs(h, seed)
    total = sum(assemble_operator(s, c, restriction=T, hierarchy=h).full for T in range(h.n_bulk))
    assert abs(total - assemble_operator(s, c).full).max() <= 1e-12


@given(cases, st.integers(1, 2))
def test_kronecker_and_qoi_preservation(case, ell):
    key, seed = case
    h = HIERS[key]
    pb = setup(h, _coeffs(h, seed))
    for variant in ("global", "stabilized", "naive"):
        Phi = build_basis(pb, ell, variant).matrix
        assert np.abs(pb.B @ Phi - np.eye(pb.n_coarse)).max() <= 1e-9
    v = np.random.default_rng(seed).standard_normal(pb.space.n_free)
    assert np.abs(pb.B @ apply_Rl(pb, ell, v) - pb.B @ v).max() <= 1e-9


@given(cases, st.floats(-3, 3))
def test_energy_norm_homogeneous(case, scale):
    key, seed = case
    h = HIERS[key]
    A = assemble_operator(build_space(h.fine), _coeffs(h, seed))
    v = np.random.default_rng(seed).standard_normal(A.shape[0])
    assert np.isclose(energy_norm(A, scale * v), abs(scale) * energy_norm(A, v), rtol=1e-12, atol=1e-300)


@given(st.floats(0.5, 4.0), st.floats(1e-6, 10.0))
def test_power_law_rates(rate, const):
    Hs = [2.0 ** -k for k in range(1, 5)]
    fit = fit_rates([(H, const * H ** rate) for H in Hs], "h-rate")
    assert np.allclose(fit.steps, rate, atol=1e-9)
