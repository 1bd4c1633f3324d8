"""Shared desk-scale models, trained once per session."""

import time

import numpy as np
import pytest

from mreq.distill import DistillPlan, post_train
from mreq.mrvq import config_from_table
from mreq.teacher import SyntheticSpec, build_nac, make_corpus, train_teacher

DESK_SPEC = SyntheticSpec(seed=100, snap_hz=48)
HELD_OUT_SPEC = SyntheticSpec(seed=10_000, snap_hz=48)
TEACHER_STEPS = 2000
POST_STEPS = 2000


@pytest.fixture(scope="session")
def desk_corpus():
    return make_corpus(64, DESK_SPEC)


@pytest.fixture(scope="session")
def held_out():
    return make_corpus(8, HELD_OUT_SPEC)


@pytest.fixture(scope="session")
def trained_teacher(desk_corpus):
    t0 = time.perf_counter()
    model = build_nac(rng=np.random.default_rng(0))
    _, trace = train_teacher(model, desk_corpus, TEACHER_STEPS)
    return {"model": model, "trace": trace, "seconds": time.perf_counter() - t0}


def _post(teacher, corpus, **plan_kw):
    t0 = time.perf_counter()
    checksum_before = teacher.checksum()
    plan = DistillPlan(steps=POST_STEPS, **plan_kw)
    student, trace = post_train(teacher, config_from_table("default"), plan, corpus)
    return {"student": student, "trace": trace, "plan": plan, "seconds": time.perf_counter() - t0,
            "teacher_before": checksum_before, "teacher_after": teacher.checksum()}


@pytest.fixture(scope="session")
def distilled(trained_teacher, desk_corpus):
    return _post(trained_teacher["model"], desk_corpus)


@pytest.fixture(scope="session")
def ablations(trained_teacher, desk_corpus):
    teacher = trained_teacher["model"]
    return {
        "no_fld": _post(teacher, desk_corpus, fld_weights=(0.0, 0.0, 0.0, 0.0)),
        "no_hsr": _post(teacher, desk_corpus, hsr_weights=(0.0, 0.0, 0.0, 0.0)),
    }


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


TRAINED = {"trained_teacher", "distilled", "ablations"}


def pytest_collection_modifyitems(items):
    for item in items:
        if TRAINED & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)
