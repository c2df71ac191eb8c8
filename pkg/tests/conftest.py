import numpy as np
import pytest

from tastr.core import Tracklet, TrackletDataset
from tastr.simulator import SimConfig, generate


def make_tracklet(tid, cam, start, n=3, d=4, ident=None, value=None, step=1.0):
    times = start + step * np.arange(n)
    feats = np.full((n, d), float(tid if value is None else value))
    return Tracklet(tid, cam, times, feats, ident)


def small_sim(**kw) -> SimConfig:
    base = dict(num_identities=40, num_cameras=3, d_raw=8, nuisance_dims=2, duration_s=3600.0, seed=5)
    base.update(kw)
    return SimConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world():
    cfg = small_sim()
    ds, truth = generate(cfg)
    return cfg, ds, truth


@pytest.fixture
def toy_dataset():
    ts = [make_tracklet(i, i % 2, 10.0 * i, ident=i // 2) for i in range(6)]
    return TrackletDataset(tuple(ts), d_raw=4, labeled=True)


# criterion -> (passed, detail); filled by test_acceptance.py, printed in the terminal summary
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
