"""Shared fixtures.

The trained-model fixtures are expensive (minutes each) and session-scoped;
unit tests stick to tiny configs and never touch them.
"""

import pytest

from heaprlab.bench import default_run_config, prepare_run, seeded_run_config


@pytest.fixture(scope="session")
def seed0_run():
    """Default-config artifacts at master seed 0 (corpus, model, calib, table)."""
    return prepare_run(default_run_config(0))


@pytest.fixture(scope="session")
def seed_runs(seed0_run):
    """Default-config artifacts for master seeds 0..4; seed 0 is shared."""
    base = default_run_config(0)
    runs = {0: seed0_run}
    for s in range(1, 5):
        runs[s] = prepare_run(seeded_run_config(base, s))
    return runs
