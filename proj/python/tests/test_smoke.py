import math

import pytest

import stale_lab as sl


def quadratic_config(**overrides):
    cfg = {
        "version": 1,
        "objective": {"kind": "quadratic", "dim": 8, "noise_std": 0.1, "batch_size": 4},
        "workers": 2,
        "inner_steps": 2,
        "rounds": 20,
        "method": "cgad",
        "delay": {"kind": "fixed", "tau": 3},
        "seed": 7,
    }
    cfg.update(overrides)
    return cfg


def test_gate_values():
    assert sl.staleness_weight(0.0) == 1.0
    assert sl.staleness_weight(32.0) == 0.0
    assert sl.staleness_weight(16.0) == pytest.approx(0.5 * math.exp(-3.2), rel=1e-12)
    assert sl.staleness_weight(5.0, alpha=0.2, tau_cut=sl.NO_CUTOFF) == pytest.approx(math.exp(-1.0))
    assert sl.cosine_gate(16.0, 32.0) == pytest.approx(0.5)


def test_gate_rejects_negative_tau():
    with pytest.raises(ValueError):
        sl.staleness_weight(-1.0)


def test_tau_sigma_peak_below_bound():
    _, value = sl.max_tau_sigma(0.2, 32.0)
    assert value <= 1.0 / (math.e * 0.2) + 1e-12
    assert sl.tau_decay_peak(0.2) == pytest.approx(1.0 / (math.e * 0.2))


def test_bound_terms_fixture():
    t = sl.bound_terms(1.0, 1.0, 1.0, 1.0, 100, 1.0, 0.2)
    assert t["optimization"] == pytest.approx(0.1, abs=1e-12)
    assert t["noise"] == pytest.approx(0.05, abs=1e-12)
    assert t["staleness"] == pytest.approx(1.0 / (2.0 * math.e), abs=1e-12)
    with pytest.raises(ValueError):
        sl.bound_terms(1.0, 1.0, 1.0, 1.0, 0, 1.0, 0.2)


def test_cgad_step_matches_adam_at_zero_delay():
    cfg = sl.OuterConfig("cgad")
    state = sl.AdamMoments(1)
    params, applied, sigma = sl.cgad_step([0.0], [1.0], 0.0, state, cfg)
    assert applied and sigma == 1.0
    assert params[0] == pytest.approx(-1e-3, rel=1e-6)
    assert state.t == 1


def test_cgad_step_drop_leaves_state():
    cfg = sl.OuterConfig("cgad")
    state = sl.AdamMoments(2)
    params, applied, sigma = sl.cgad_step([1.0, 2.0], [0.5, 0.5], 40.0, state, cfg)
    assert not applied and sigma == 0.0
    assert params == [1.0, 2.0]
    assert state.t == 0 and state.m == [0.0, 0.0]


def test_quantize_round_trip():
    values = [0.0, 0.3, -1.7, 1.7, 0.01]
    codes, max_abs = sl.quantize(values)
    assert max_abs == [1.7]
    assert codes[2] == -127 and codes[3] == 127
    back = sl.round_trip(values)
    for x, y in zip(values, back):
        assert abs(x - y) <= 1.7 / 127 / 2 + 1e-15
    assert sl.round_trip([0.0] * 4, 2) == [0.0] * 4


def test_run_is_deterministic():
    a = sl.run(quadratic_config())
    b = sl.run(quadratic_config())
    assert a == b
    assert a["rounds_completed"] == 20
    assert sl.config_hash(quadratic_config()) == sl.config_hash(quadratic_config())
    assert sl.config_hash(quadratic_config(seed=8)) != sl.config_hash(quadratic_config())


def test_bad_config_names_field():
    with pytest.raises(ValueError, match="outer.beta1"):
        sl.run(quadratic_config(outer={"beta1": 1.5}))


def test_verify_suite_passes():
    results = sl.verify()
    assert results and all(ok for _, ok, _ in results)
