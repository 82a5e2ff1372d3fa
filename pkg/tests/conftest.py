import hashlib
import json

import numpy as np
import pytest

from lambda_idc.model import ModelParams, mean_photon_number

ACCEPTANCE_LINES = []


def series_key(alpha_sq, kappa, total_steps=35000, chi=5.0):
    key = json.dumps([float(alpha_sq), float(kappa), int(total_steps), float(chi)])
    return hashlib.sha1(key.encode()).hexdigest()[:16] + ".npy"


@pytest.fixture(scope="session")
def series_cache(request):
    """Full <N1(tau)> series for tau = 0..total_steps, cached across test sessions.

    The first run computes every series from the closed form; later runs
    reuse the arrays from pytest's cache directory.
    """
    root = request.config.cache.mkdir("lambda_idc_series")

    def get(alpha_sq, kappa, total_steps=35000, chi=5.0):
        path = root / series_key(alpha_sq, kappa, total_steps, chi)
        if path.exists():
            return np.load(path)
        params = ModelParams(chi=chi, kappa=kappa, alpha=np.sqrt(alpha_sq))
        y = mean_photon_number(params, np.arange(total_steps + 1, dtype=float))
        np.save(path, y)
        return y

    return get


@pytest.fixture(scope="session")
def report():
    """Record one acceptance line; all lines are repeated in the terminal summary."""

    def add(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
