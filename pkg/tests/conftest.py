import pytest

from rethseg.tensor import get_precision, set_precision


@pytest.fixture(autouse=True)
def _restore_precision():
    # precision is process-wide state; never let one test leak into another
    mode = get_precision()
    yield
    set_precision(mode)
