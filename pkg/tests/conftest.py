import json

import numpy as np
import pytest

from adaptmct import (
    AdaptationConfig,
    StageSummary,
    contrasts_for_models,
    default_candidates,
    run_interim,
)

# Two-stage worked example, reconstructed from its summary statistics:
# five doses, equal stage-1 groups of 24, pooled sd 1.58 (nu1 = 115);
# three retained doses with stage-2 groups of 40, pooled sd 1.52.
DOSES = np.array([0.0, 0.05, 0.20, 0.60, 1.00])
STAGE1_MEANS = np.array([0.52, 0.47, 1.09, 1.70, 0.45])
STAGE1_SD = 1.58
STAGE2_DOSES = np.array([0.0, 0.20, 0.60])
STAGE2_MEANS = np.array([-0.09, 0.77, 0.73])
STAGE2_SD = 1.52
SIGMA = 1.478


@pytest.fixture(scope="session")
def stage1():
    return StageSummary(DOSES, np.full(5, 24), STAGE1_MEANS, 115 * STAGE1_SD ** 2)


@pytest.fixture(scope="session")
def stage2():
    return StageSummary(STAGE2_DOSES, np.full(3, 40), STAGE2_MEANS, 117 * STAGE2_SD ** 2)


@pytest.fixture(scope="session")
def candidates():
    return default_candidates()


@pytest.fixture(scope="session")
def contrasts1(stage1, candidates):
    return contrasts_for_models(candidates, stage1.doses, stage1.n)


@pytest.fixture(scope="session")
def interim(stage1, candidates, contrasts1):
    return run_interim(stage1, candidates, 120, AdaptationConfig(0.0), contrasts1)


@pytest.fixture()
def example_config_dict():
    return {
        "design": {"doses": DOSES.tolist(), "alpha": 0.05},
        "candidates": [
            {"family": "emax", "theta": [0.2, 0.7, 0.2]},
            {"family": "linear-log", "theta": [0.2, 0.6 / np.log(6.0)]},
            {"family": "linear", "theta": [0.2, 0.6]},
            {"family": "quadratic", "theta": [0.2, 2.049, -1.749]},
            {"family": "logistic", "theta": [0.193, 0.607, 0.4, 0.09]},
        ],
        "adaptation": {"delta": 0.0, "model_policy": "refit-with-fallbacks"},
        "method": {"test": "agmct", "within_stage": "tippett",
                   "across_stage": "inverse-normal", "variance": "unknown",
                   "seed": 7},
    }


@pytest.fixture()
def example_files(tmp_path, stage1, stage2, example_config_dict):
    """Worked-example dataset + config written to disk for CLI tests."""
    from adaptmct.analyze import synthesize_subjects

    rows = synthesize_subjects(stage1, 1) + synthesize_subjects(stage2, 2)
    data = tmp_path / "example.csv"
    with open(data, "w") as fh:
        fh.write("stage,dose,response\n")
        for st, d, y in rows:
            fh.write(f"{st},{d},{y!r}\n")
    config = tmp_path / "config.json"
    config.write_text(json.dumps(example_config_dict))
    return data, config
