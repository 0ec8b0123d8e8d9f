from __future__ import annotations

import numpy as np
import pytest

from latentmcif.dataset import LightCurve


def make_curve(object_id: str = "o1", n: int = 6, label: str | None = "A", seed: int = 0,
               redshift: float = 0.1, mwebv: float = 0.05) -> LightCurve:
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(-20, 60, n))
    flux = 100 * np.exp(-((t - 10) / 15) ** 2) + rng.normal(0, 2, n)
    err = rng.uniform(1, 3, n)
    band = rng.integers(0, 2, n)
    return LightCurve(object_id, t, flux, err, band, redshift, mwebv, label)


def blobs(centers, n_per: int, spread: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(c, spread, size=(n_per, len(c))) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_per)
    return X, y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, echoed in the terminal summary so they land in the test log
ACCEPTANCE: list[str] = []


def verdict(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
