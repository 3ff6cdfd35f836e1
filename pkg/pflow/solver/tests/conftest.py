import numpy as np
import pytest
from scipy import sparse

from core.fe import FeSpace
from core.mesh import unit_square_mesh
from core.stepper import StepProblem
from core.structure import StructureParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mesh4():
    return unit_square_mesh(4)


@pytest.fixture
def space4(mesh4):
    return FeSpace(mesh4)


@pytest.fixture
def free_space4(mesh4):
    return FeSpace(mesh4, constrained=False)


@pytest.fixture(params=[(1.5, 0.0), (1.5, 1e-3), (2.0, 0.0), (2.0, 1.0)],
                ids=lambda pd: f"p{pd[0]}-d{pd[1]}")
def params(request):
    p, delta = request.param
    return StructureParams(p=p, delta=delta)


@pytest.fixture
def indefinite_tangent(monkeypatch):
    """Newton tangent is negative definite whenever epsilon is zero"""
    original = StepProblem.tangent

    def tangent(self, w):
        if self.params.epsilon == 0:
            return -sparse.identity(self.space.num_dofs, format='csr')
        return original(self, w)

    monkeypatch.setattr(StepProblem, 'tangent', tangent)
