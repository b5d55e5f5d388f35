import copy
import json

import numpy as np
import pytest

from hcs import HcsError, pipeline
from hcs.io import write_json

from conftest import LINEAR_HYBRID


def singular_reset_config():
    cfg = copy.deepcopy(LINEAR_HYBRID)
    cfg["system"]["transitions"][0]["reset"]["matrix"] = [[1.0, 0.5], [2.0, 1.0]]
    return pipeline.resolve_config(config=cfg)


def test_presets_load_and_fill_defaults():
    for name in pipeline.PRESETS:
        cfg = pipeline.resolve_config(experiment=name)
        assert cfg["experiment"] == name
        assert {"eta_schedule", "tol", "max_iter"} <= set(cfg["sdp"])
        assert cfg["nominal"]["method"] == "ilqr"


def test_overrides():
    cfg = pipeline.resolve_config(experiment="bouncing-ball", eta=1e-7, tol=1e-10, max_iter=17, samples=9, seed=3,
                                  threads=2)
    assert cfg["sdp"]["eta_schedule"] == pytest.approx([1e-3, 1e-5, 1e-7])
    assert cfg["sdp"]["tol"] == 1e-10
    assert cfg["sdp"]["max_iter"] == 17 and cfg["nominal"]["max_iterations"] == 17
    assert cfg["simulation"] == {"samples": 9, "seed": 3, "threads": 2, "thinning": 10}


@pytest.mark.parametrize(
    "kwargs",
    [{}, {"experiment": "bouncing-ball", "config": {}}, {"experiment": "pogo"},
     {"config": {"system": {}}}, {"experiment": "slip", "eta": -1.0}, {"experiment": "slip", "tol": 0.0},
     {"experiment": "slip", "max_iter": 0}],
)
def test_resolve_config_errors(kwargs):
    with pytest.raises(HcsError) as err:
        pipeline.resolve_config(**kwargs)
    assert err.value.kind == "config-error"


def test_manifest_is_accepted_as_config(tmp_path):
    cfg = pipeline.resolve_config(config=copy.deepcopy(LINEAR_HYBRID))
    write_json(tmp_path / "manifest.json", {"command": "steer", "config": cfg})
    again = pipeline.resolve_config(config_path=tmp_path / "manifest.json")
    assert again == cfg


def test_auto_picks_analytic_for_invertible_jumps(linear_config):
    out = pipeline.run_steer(linear_config, "auto")
    assert out.method == "analytic"
    summary = pipeline.summarize(out)
    assert summary["terminal_error"] < 1e-6
    assert summary["jumps"][0]["sigma_plus_rank"] == 2
    assert summary["jumps"][0]["pi_jump_residual"] < 1e-6


def test_both_methods_agree_on_an_invertible_jump(linear_config, linear_outcome):
    sdp = pipeline.run_steer(linear_config, "sdp")
    np.testing.assert_allclose(sdp.solution.sigma_minus, linear_outcome.solution.sigma_minus, atol=1e-6)
    summary = pipeline.summarize(sdp)
    assert summary["method"] == "sdp" and summary["eta"] == 0.0
    assert "pi_jump_residual" not in summary["jumps"][0]


def test_singular_jump_falls_back_to_the_convex_program():
    cfg = singular_reset_config()
    with pytest.raises(HcsError) as err:
        pipeline.run_steer(cfg, "analytic")
    assert err.value.kind == "noninvertible-saltation"
    out = pipeline.run_steer(cfg, "auto")
    assert out.method == "sdp"
    summary = pipeline.summarize(out)
    assert summary["jumps"][0]["sigma_plus_rank"] == 1
    assert summary["terminal_error"] < 1e-6
    assert len(summary["eta_history"]) == 3


def test_plan_archive_round_trip(linear_outcome):
    plan = linear_outcome.feedback_plan()
    back, cfg = pipeline.plan_from_arrays(pipeline.plan_to_arrays(plan, linear_outcome.config))
    assert cfg == json.loads(json.dumps(linear_outcome.config))
    for field in ("times", "x_ref", "u_ref", "gains", "planned_sigma", "nominal_segment", "x0", "sigma0", "sigma_t"):
        np.testing.assert_array_equal(getattr(back, field), getattr(plan, field))
    assert back.segment_modes == plan.segment_modes and back.label == plan.label


def test_plan_archive_missing_key(linear_outcome):
    arrays = pipeline.plan_to_arrays(linear_outcome.feedback_plan(), linear_outcome.config)
    del arrays["gains"]
    with pytest.raises(HcsError):
        pipeline.plan_from_arrays(arrays)


def test_rank_helpers():
    assert pipeline.numerical_rank(np.diag([1.0, 1e-12])) == 1
    assert pipeline.eigen_ratio(np.diag([2.0, 0.5])) == pytest.approx(0.25)
    assert pipeline.invertible_chain([np.eye(2)]) and not pipeline.invertible_chain([np.ones((2, 1))])
    assert not pipeline.invertible_chain([np.diag([1.0, 1e-10])])


def test_unknown_method_and_nonpositive_noise(linear_config):
    with pytest.raises(HcsError):
        pipeline.run_steer(linear_config, "magic")
    bad = copy.deepcopy(linear_config)
    bad["epsilon"] = 0.0
    with pytest.raises(HcsError):
        pipeline.run_steer(bad, "analytic")
    bad["epsilon"], bad["nominal"]["method"] = 0.1, "random"
    with pytest.raises(HcsError):
        pipeline.run_steer(bad, "analytic")
