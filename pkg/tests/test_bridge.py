import math

import numpy as np
import pytest

from conftest import crm_scenario, random_crm
from multiwell.bridge import crm_to_mdcv, equivalence_check
from multiwell.convolution import DeconvolutionModel
from multiwell.crm import CrmModel
from multiwell.errors import ModelError
from multiwell.utr import Utr, UtrMatrix
from multiwell.welldata import RateHistory


def test_self_response_coefficients():
    # [PAPER] tau 5, gamma 25: jump 0.2, slope 0.04
    m = crm_to_mdcv(CrmModel(("P",), ("I",), [5.0], [25.0], [[0.5]]), {"P": 200.0})
    u = m.utrs.get("P", "P")
    assert u.jump == pytest.approx(0.2, rel=1e-15)
    assert np.allclose(u.derivative([0.1, 1.0, 300.0]), 0.04, rtol=1e-14)


def test_producer_pairs_have_zero_response():
    m = crm_to_mdcv(CrmModel(("P1", "P2"), ("I",), [5.0, 7.0], [25.0, 30.0], [[0.5], [0.3]]),
                    {"P1": 200.0, "P2": 210.0})
    assert m.utrs.get("P1", "P2").is_zero and m.utrs.get("P2", "P1").is_zero
    assert not m.utrs.active("P1", "P2")
    assert set(m.p0) == {"P1", "P2"}


def test_injector_response_slope():
    # [PAPER] f 0.6, gamma 50: 0.012 per day
    m = crm_to_mdcv(CrmModel(("P",), ("I",), [5.0], [50.0], [[0.6]]), {"P": 200.0})
    u = m.utrs.get("P", "I")
    assert u.jump == 0.0
    assert float(u(10.0)) == pytest.approx(0.12, rel=1e-14)


def test_missing_p0_or_zero_gamma_rejected():
    with pytest.raises(ModelError):
        crm_to_mdcv(CrmModel(("P",), ("I",), [5.0], [25.0], [[0.5]]), {})
    with pytest.raises(ModelError):
        crm_to_mdcv(CrmModel(("P",), ("I",), [5.0], [0.0], [[0.5]]), {"P": 200.0})


def test_random_models_are_equivalent(rng):
    for _ in range(5):
        truth = random_crm(rng)
        s = crm_scenario(truth, rng)
        report = equivalence_check(truth, s)
        assert report.passed and report.max_relative_deviation <= 1e-9


def test_zero_rates_give_exactly_zero_deviation(rng):
    truth = random_crm(rng)
    s = crm_scenario(truth, rng)
    s = s.with_rates({n: RateHistory([0.0], [0.0]) for n in s.names})
    assert equivalence_check(truth, s).max_relative_deviation == 0.0


def test_one_percent_slope_perturbation_fails(rng):
    truth = random_crm(rng)
    s = crm_scenario(truth, rng)
    model = crm_to_mdcv(truth, s.p0)
    n = truth.producers[0]
    u = model.utrs.get(n, n)
    responses = dict(model.utrs.responses)
    responses[(n, n)] = Utr(u.jump, u.node_times, u.z + math.log(1.01))
    perturbed = DeconvolutionModel(model.p0, UtrMatrix(model.utrs.wells, responses))
    report = equivalence_check(truth, s, model=perturbed)
    assert not report.passed
    assert report.max_relative_deviation > 1e-9
