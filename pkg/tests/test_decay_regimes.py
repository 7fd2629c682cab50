"""Localization decay at a coarse scale where patches do not saturate.

At H=1/2 the patch covers the whole domain after one or two layers, so the
naive error drops straight to round-off. H=1/8 leaves room for the decay.
"""
import numpy as np

from mdlod.experiments import config_from_dict, fit_rates, run_experiment

ROUGH = {"A0": {"kind": "random-checkerboard", "seed": 42, "lo": 0.01, "hi": 1.0}}


def _errors(**kw):
    base = dict(experiment="decay", variant="naive", H=["1/8"], h="1/32", ell=[1, 2, 3, 4, 5],
                coefficients=ROUGH, sources={"f0": 1.0, "f1": 1.0})
    base.update(kw)
    rows = run_experiment(config_from_dict(base))
    return np.array([r.err_energy for r in rows]), fit_rates(rows, "ell-decay").slope


def test_cross_decays_at_fine_coarse_scale():
    err, slope = _errors(geometry="cross")
    assert np.all(np.diff(err) < 0)
    assert slope <= -1.0


def test_staircase_agglomerated_decays():
    err, slope = _errors(geometry={"domain": [0, 0, 1, 1], "staircases": [[[0, 0.25], [1, 0.75]]]},
                         interpolation="pou",
                         coarse={"kind": "agglomerated", "rho0": 0.1, "rho1": 1.25, "min_fraction": 0.25})
    assert err[-1] < err[0]
    assert slope <= -1.0
