import numpy as np
import pytest

from rss_atlas import dataset as dsm


@pytest.fixture(scope="session")
def small_synth_config():
    """Small survey: quick to generate, enough rows for GP and AE smoke runs."""
    area = (80.0, 50.0)
    return dsm.SynthEnvConfig(
        area=area,
        n_aps=16,
        shadowing_std_dbm=3.0,
        shadowing_correlation_length_m=4.0,
        waypoints=dsm.serpentine_waypoints(area, margin_m=8.0, pass_gap_m=11.0),
        sample_spacing_m=1.5,
    )


@pytest.fixture(scope="session")
def small_survey(small_synth_config):
    return dsm.synthesize(small_synth_config, seed=11)


@pytest.fixture(scope="session")
def small_survey_normalized(small_survey):
    return dsm.normalize(small_survey)


@pytest.fixture()
def rng():
    return np.random.default_rng(42)
