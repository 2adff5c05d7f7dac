import numpy as np
import pytest

from siamtrack import synth
from siamtrack.tensor.network import TOY_PROFILE, Network


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_net():
    return Network(TOY_PROFILE, seed=3, dtype=np.float64)


def small_scene(n_frames=6, static=False, seed=5, size=96):
    """A small scene with one blob landmark and one vessel of clutter."""
    amp = 0.0 if static else 1.2
    return synth.SceneSpec(
        width=size, height=size, n_frames=n_frames, seed=seed, name="small",
        structures=[
            synth.Structure("lm0", "blob", x=size / 2 - 0.3, y=size / 2 + 0.2, radius=9.0, contrast=2.0,
                            amp_x_mm=amp, amp_y_mm=amp / 2, period=20.0, landmark=True),
            synth.Structure("c0", "vessel", x=20.0, y=24.0, radius=8.0, aspect=0.5, contrast=1.0),
        ],
    )


@pytest.fixture
def scene_dir(tmp_path):
    return synth.write_scene(small_scene(), tmp_path / "small")


_ACCEPTANCE = {}


def record_acceptance(number, title, ok, detail):
    """Collect one acceptance line; printed in the terminal summary."""
    _ACCEPTANCE[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number} {title}: {detail}"
    print(_ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
