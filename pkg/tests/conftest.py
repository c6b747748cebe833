import os

import pytest


@pytest.fixture(autouse=True, scope="session")
def _isolated_calibration_cache(tmp_path_factory):
    """Keep simulated-null calibrations out of the user cache and share them
    across the whole test session."""
    path = tmp_path_factory.mktemp("calib")
    old = os.environ.get("WMKIT_CALIB_DIR")
    os.environ["WMKIT_CALIB_DIR"] = str(path)
    yield
    if old is None:
        os.environ.pop("WMKIT_CALIB_DIR", None)
    else:
        os.environ["WMKIT_CALIB_DIR"] = old
