import numpy as np
import pytest

from dpatn.synth import HazeRecipe, procedural_depth, procedural_scene, synth_hazy


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def hazy_pair():
    """Small hazy scene with its clean image, transmission and airlight level."""
    clean = procedural_scene(40, 40, seed=3)
    depth = procedural_depth("ramp", 40, 40, seed=4)
    recipe = HazeRecipe(a=0.9, beta=0.8, crop=None)
    obs, t = synth_hazy(clean, depth, recipe)
    return obs, clean, t, recipe.a


def reflect_index(i, n):
    # symmetric (edge-repeating) reflection of an out-of-range index
    while i < 0 or i >= n:
        i = -i - 1 if i < 0 else 2 * n - 1 - i
    return i


_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Criterion number -> one-line PASS/FAIL summary, printed after the run."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[key])
