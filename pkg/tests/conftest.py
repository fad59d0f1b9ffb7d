import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from paramprune.mbmodel import build_hexaglide, build_puma560
from paramprune.tree import forward_kinematics, kinematic_tree

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

REPO = Path(__file__).resolve().parents[1]
# trajectories and datasets are cached between sessions; delete the folder to regenerate
CACHE_DIR = Path(os.environ.get("PARAMPRUNE_TEST_CACHE", REPO / ".paramprune_cache"))


@pytest.fixture(scope="session")
def puma():
    return build_puma560()


@pytest.fixture(scope="session")
def hexa():
    return build_hexaglide()


def potential_energy(model, q):
    """-sum m g . c over bodies, from world frame poses."""
    tree = kinematic_tree(model)
    states = forward_kinematics(tree, np.asarray(q, dtype=float), world=True)
    g = np.asarray(model.gravity)
    V = 0.0
    for b, body in enumerate(model.bodies):
        st = states[tree.body_joint[b]]
        V -= g @ (body.m * st.pw + st.Rw @ np.asarray(body.d))
    return V


_PIPELINES = {}


def pipeline_result(system, tmp_root):
    """Session-wide pipeline run with the acceptance selection sizes."""
    from paramprune.pipeline import PipelineConfig, run_pipeline

    if system not in _PIPELINES:
        cfg = PipelineConfig(model=system, output_dir=str(Path(tmp_root) / system), cache_dir=str(CACHE_DIR),
                             selected_k={"puma560": 18, "hexaglide": 17}[system])
        _PIPELINES[system] = run_pipeline(cfg)
    return _PIPELINES[system]


@pytest.fixture(scope="session")
def pipeline_root(tmp_path_factory):
    return tmp_path_factory.mktemp("pipeline")


@pytest.fixture(scope="session")
def puma_run(pipeline_root):
    return pipeline_result("puma560", pipeline_root)


@pytest.fixture(scope="session")
def hexa_run(pipeline_root):
    return pipeline_result("hexaglide", pipeline_root)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.REPORT:
        return
    terminalreporter.section("acceptance")
    for key in sorted(mod.REPORT, key=str):
        terminalreporter.write_line(mod.REPORT[key])
