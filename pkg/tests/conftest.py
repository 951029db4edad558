import contextlib
import time

import numpy as np
import pytest

from hpvd.geometry import Box3
from hpvd.phantom import PhantomConfig, generate_study
from hpvd.volume import PHASES, LesionAnnotation, Study, Volume


def rasterize(box: Box3, shape=(32, 32, 32)) -> np.ndarray:
    """Boolean (z, y, x) voxel set of an integer-aligned box."""
    grid = np.zeros(shape, dtype=bool)
    grid[int(box.z0):int(box.z1), int(box.y0):int(box.y1), int(box.x0):int(box.x1)] = True
    return grid


def random_int_box(rng, hi=24, max_ext=10) -> Box3:
    lo = rng.integers(0, hi, size=3)
    ext = rng.integers(1, max_ext + 1, size=3)
    return Box3(*lo, *(lo + ext))


def make_study(arrays, study_id="s", lesions=(), mask=None, spacing=(1.0, 1.0, 5.0)) -> Study:
    vols = {p: Volume(np.asarray(a, dtype=np.float64), spacing, p) for p, a in arrays.items()}
    return Study(study_id, vols, mask, list(lesions))


@pytest.fixture(scope="session")
def small_phantom_cfg():
    return PhantomConfig(dims=(32, 32, 12), liver_center=(16.0, 16.0, 6.0), liver_axes=(14.0, 13.0, 5.5),
                         inplane_semi_axis=(3.0, 5.0), depth_semi_axis=(1.2, 2.0), n_speckles=2)


@pytest.fixture(scope="session")
def phantom_study(small_phantom_cfg):
    return generate_study(small_phantom_cfg, 7, "p7", n_hcc=1, n_tace=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ---------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, tuple[str, str, float]] = {}


@contextlib.contextmanager
def criterion(number: int, title: str, max_seconds: float | None = None):
    """Record PASS/FAIL for one acceptance criterion, runtime limit included.

    The body may append short notes to the yielded list."""
    detail: list[str] = []
    t0 = time.perf_counter()
    try:
        yield detail
        elapsed = time.perf_counter() - t0
        if max_seconds is not None:
            assert elapsed < max_seconds, f"runtime {elapsed:.1f}s exceeds {max_seconds:g}s"
    except BaseException as exc:
        elapsed = time.perf_counter() - t0
        msg = " ".join(str(exc).split())[:160]
        ACCEPTANCE_RESULTS[number] = ("FAIL", f"{title}: {msg}", elapsed)
        print(f"CRITERION {number} FAIL  {title}: {msg} ({elapsed:.1f}s)")
        raise
    info = f"{title}" + (f" [{'; '.join(detail)}]" if detail else "")
    ACCEPTANCE_RESULTS[number] = ("PASS", info, elapsed)
    print(f"CRITERION {number} PASS  {info} ({elapsed:.1f}s)")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        status, info, elapsed = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {info} ({elapsed:.1f}s)")


__all__ = ["criterion", "rasterize", "random_int_box", "make_study", "PHASES", "LesionAnnotation"]
