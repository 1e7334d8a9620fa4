from __future__ import annotations

import pytest

from adatool.core import Kind, Observation, Thought
from adatool.toolenv import GenSpec, generate_tasks
from helpers import answer_step, make_traj, tool_step


@pytest.fixture(scope="session")
def mixed_tasks():
    counts = {kind: 3 for kind in Kind}
    return generate_tasks(GenSpec(counts=counts, seed=7))


@pytest.fixture
def answered_traj():
    return make_traj([Thought("x"), tool_step(), Observation("err"), Thought("y"), answer_step()])
