"""
Shared fixtures: small hand-built datasets and model specifications.
"""
import math

import numpy as np
import pytest

from bayesurv.data import CensoringStatus, Dataset, SurvivalRecord
from bayesurv.model import ModelSpec, NaturalParams
from bayesurv.priors import PriorAssignment, PriorFamily, ScalarPrior


def record(time, status=CensoringStatus.EVENT, *, entry=0.0, upper=None, x=(), clusters=None, group=None):
    return SurvivalRecord(
        entry_time=entry,
        time=time,
        upper_time=upper,
        status=CensoringStatus(status),
        covariates=tuple(float(v) for v in x),
        cluster_labels=clusters or {},
        group_id=group,
    )


@pytest.fixture
def make_record():
    return record


@pytest.fixture
def flat_priors():
    return PriorAssignment(intercept=ScalarPrior(family=PriorFamily.FLAT))


@pytest.fixture
def exp_spec():
    """Unit-rate exponential with no covariates."""
    return ModelSpec(baseline="exp")


@pytest.fixture
def unit_params():
    return NaturalParams(intercept=0.0, beta=np.zeros(0), aux=np.zeros(0))


@pytest.fixture
def small_dataset():
    """Eight records covering right, event, left and interval censoring plus delayed entry."""
    rows = [
        record(1.0, CensoringStatus.EVENT, x=(0.0,)),
        record(2.0, CensoringStatus.RIGHT_CENSORED, x=(1.0,)),
        record(1.5, CensoringStatus.EVENT, entry=0.5, x=(1.0,)),
        record(3.0, CensoringStatus.EVENT, x=(0.0,)),
        record(0.7, CensoringStatus.LEFT_CENSORED, x=(1.0,)),
        record(1.2, CensoringStatus.INTERVAL_CENSORED, upper=2.4, x=(0.0,)),
        record(4.0, CensoringStatus.RIGHT_CENSORED, entry=1.0, x=(0.0,)),
        record(2.2, CensoringStatus.EVENT, x=(1.0,)),
    ]
    return Dataset(rows, ["trt"])


@pytest.fixture
def clustered_dataset():
    """Three sites of four records; consecutive pairs share a subject id."""
    rng = np.random.default_rng(7)
    rows = []
    for j, site in enumerate(["a", "b", "c"]):
        for k in range(4):
            t = float(rng.uniform(0.5, 5.0))
            status = CensoringStatus.EVENT if k % 3 else CensoringStatus.RIGHT_CENSORED
            rows.append(record(t, status, x=(float(k % 2),), clusters={"site": site}, group=f"{site}{k // 2}"))
    return Dataset(rows, ["trt"])


@pytest.fixture
def event_times_dataset():
    """Four events at 1, 2, 3, 4: E = 4, T = 10."""
    return Dataset([record(t) for t in (1.0, 2.0, 3.0, 4.0)], [])


def central_difference(f, u, h=1e-6):
    grad = np.zeros_like(u)
    for k in range(u.size):
        step = np.zeros_like(u)
        step[k] = h * max(1.0, abs(u[k]))
        grad[k] = (f(u + step) - f(u - step)) / (2.0 * step[k])
    return grad


LOG_INTERVAL_1_2 = math.log(math.exp(-1.0) - math.exp(-2.0))
