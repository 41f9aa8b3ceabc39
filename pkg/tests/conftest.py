import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from epconv import kernels

BACKENDS = kernels.available_backends()


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run the test once per available kernel backend."""
    with kernels.use_backend(request.param):
        yield request.param


@pytest.fixture(autouse=True)
def _default_backend():
    # tests that don't take the backend fixture run on the numpy reference
    with kernels.use_backend("numpy"):
        yield
