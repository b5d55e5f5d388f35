import copy

import numpy as np
import pytest

from hcs import pipeline

# Double integrator that switches to an oscillator at a fixed time. The time
# guard makes every sample jump at the same instant, so the linearization is
# exact and Monte-Carlo statistics must match the plan up to sampling error.
LINEAR_HYBRID = {
    "experiment": "linear-hybrid",
    "system": {
        "dt": 0.005,
        "horizon": 1.0,
        "initial_mode": 1,
        "modes": [
            {"id": 1, "A": [[0, 1], [0, 0]], "B": [[0], [1]]},
            {"id": 2, "A": [[0, 1], [-1, 0]], "B": [[0], [1]]},
        ],
        "transitions": [
            {
                "from": 1,
                "to": 2,
                "guard": {"coeffs": [0, 0], "time_coeff": 1.0, "offset": -0.5025, "direction": 1},
                "reset": {"matrix": [[1, 0], [0.3, -0.5]]},
            }
        ],
    },
    "x0": [0.0, 1.0],
    "sigma0": [[0.4, 0.1], [0.1, 0.3]],
    "sigma_t": [[0.05, 0.0], [0.0, 0.08]],
    "epsilon": 0.1,
    "nominal": {"method": "zero"},
    "simulation": {"samples": 400, "seed": 0, "threads": 1, "thinning": 10},
}


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def linear_config():
    return pipeline.resolve_config(config=copy.deepcopy(LINEAR_HYBRID))


@pytest.fixture(scope="session")
def linear_outcome():
    cfg = pipeline.resolve_config(config=copy.deepcopy(LINEAR_HYBRID))
    return pipeline.run_steer(cfg, "analytic")


@pytest.fixture(scope="session")
def ball_outcome():
    """Bouncing-ball preset steered in closed form (iLQR nominal, about six seconds)."""
    return pipeline.run_steer(pipeline.resolve_config(experiment="bouncing-ball"), "analytic")
