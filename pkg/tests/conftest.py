import time
from typing import NamedTuple

import numpy as np
import pytest

from wisense.channel import ReceiverSpec, Scene
from wisense.config import load_scenario


def facing(pos, target):
    return float(np.arctan2(target[1] - pos[1], target[0] - pos[0]))


def make_default_scene(**kw) -> Scene:
    """Same geometry as the bundled default_3rx scenario."""
    return load_scenario("default_3rx").build_scene() if not kw else _custom(**kw)


def _custom(user=(3.0, 4.0), rx_pos=((6.0, 0.0), (-2.0, 5.0), (4.0, -3.0)), **scene_kw):
    mid = (user[0] / 2, user[1] / 2)
    rx = tuple(ReceiverSpec(p, facing(p, mid), i) for i, p in enumerate(rx_pos))
    return Scene((0.0, 0.0), rx, user, **scene_kw)


@pytest.fixture(scope="session")
def default_scene():
    return make_default_scene()


class TrainedPolicy(NamedTuple):
    result: object
    stem: object
    seconds: float


# (criterion number, passed, detail) rows filled in by test_acceptance
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def trained_policy(tmp_path_factory):
    """Policy trained once on the economy_default distribution, shared by several tests."""
    from wisense import dpolicy

    sc = load_scenario("economy_default")
    t = sc.training
    t0 = time.perf_counter()
    res = dpolicy.train_policy(sc.env_sampler(), dpolicy.BetaSchedule.linear(t.T, t.beta_min, t.beta_max),
                               sc.train_config(seed=2024), dpolicy.PricingBox.from_grid(sc.pricing_grid()))
    seconds = time.perf_counter() - t0
    stem = tmp_path_factory.mktemp("policy") / "policy"
    dpolicy.save_checkpoint(res, stem)
    return TrainedPolicy(res, stem, seconds)
