import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from floodseg.kernels import available_backends


@pytest.fixture(params=available_backends(), ids=lambda b: b.NAME)
def kernel_backend(request):
    return request.param
