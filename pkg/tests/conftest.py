import numpy as np
import pytest

from regforge.runtime import embed_image
from regforge.synthetic import PlantSpec, generate_planted_model, image_sequence, make_images, random_model

_ACCEPTANCE: list[tuple[str, bool | None, str]] = []


def _status(ok: bool | None) -> str:
    return "SKIP" if ok is None else ("PASS" if ok else "FAIL")


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion (``ok=None`` marks a skip)."""

    def record(name: str, ok: bool | None, detail: str) -> bool | None:
        line = f"{_status(ok)} {name}: {detail}"
        print(line)
        _ACCEPTANCE.append((name, ok, detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{_status(ok)} {name}: {detail}")


@pytest.fixture(scope="session")
def planted():
    return generate_planted_model(PlantSpec(seed=0))


@pytest.fixture(scope="session")
def planted_fixed():
    return generate_planted_model(PlantSpec(seed=1, trigger="fixed_position", trigger_position=(2, 3)))


@pytest.fixture(scope="session")
def planted_images(planted):
    images = make_images(planted, 6, seed=1)
    return images, [image_sequence(planted, im) for im in images]


@pytest.fixture(scope="session")
def tiny():
    """A random tiny model plus one embedded random image."""
    m = random_model(3)
    px = np.random.default_rng(3).normal(size=(m.config.image_size, m.config.image_size, 3))
    return m, embed_image(px, m.config, m.weights)
