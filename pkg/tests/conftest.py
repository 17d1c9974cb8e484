import os

os.environ.setdefault("DDS_ENVIRONMENT", "test")

import pytest  # noqa: E402
import torch  # noqa: E402

from app.shared.config import get_settings  # noqa: E402


@pytest.fixture(autouse=True)
def _test_settings():
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)
