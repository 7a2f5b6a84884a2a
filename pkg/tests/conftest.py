import numpy as np
import pytest

import kvrouter as kr


@pytest.fixture(scope="session")
def desk_model():
    return kr.build_model(kr.DESK_SPEC)


@pytest.fixture(scope="session")
def full_space():
    return kr.full_space()


@pytest.fixture(scope="session")
def calib11():
    return kr.calib11_space()


@pytest.fixture(scope="session")
def desk_l2_table(desk_model, full_space):
    """One full 54-config L2 calibration of the desk model, reused suite-wide."""
    return kr.calibrate_l2(desk_model, kr.CALIBRATION_PROMPT, full_space, seed=7)


def synthetic_table(space, num_layers, seed, scale=1.0):
    """Random positive sensitivity table with a zero identity column."""
    rng = np.random.Generator(np.random.PCG64(seed))
    scores = rng.lognormal(mean=-1.0, sigma=1.0, size=(num_layers, len(space))) * scale
    scores[:, space.identity_id] = 0.0
    return kr.SensitivityTable(
        scores=scores, space=space, model_spec_hash="f" * 64,
        prompt_id="synthetic", metric="l2_proxy", scorer="random_perm", seed=seed,
    )
