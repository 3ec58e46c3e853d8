import importlib

import pytest

import gradmerge.cells
import gradmerge.field
from gradmerge import _kernels_py

BACKENDS = ["python"]
try:
    importlib.import_module("gradmerge._kernels")
    BACKENDS.append("cython")
except ImportError:
    pass


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    mod = _kernels_py if request.param == "python" else importlib.import_module("gradmerge._kernels")
    monkeypatch.setattr(gradmerge.field, "kernels", mod)
    monkeypatch.setattr(gradmerge.cells, "kernels", mod)
    return request.param
