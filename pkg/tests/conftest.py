"""Shared fixtures. Heavy artifacts (preset dataset, 5-seed ablation) are
session-scoped so the acceptance criteria and the unit tests pay for them
once."""

import numpy as np
import pytest

from microdiag.prng import prng_new
from microdiag.simulator import (
    ScenarioSpec,
    generate_topology,
    schedule_faults,
    scenario_preset,
    simulate,
)
from microdiag.train_eval import ablate, prepare_dataset
from microdiag.types import RunConfig, Task


TINY_SPEC = ScenarioSpec(
    n_nodes=5, edge_density=1.6, duration_s=1800, n_faults=12,
    window_len_s=30, stride_s=30,
)


@pytest.fixture(scope="session")
def tiny_sim():
    """Small raw simulation: (spec, graph, faults, stream)."""
    spec = TINY_SPEC
    root = prng_new(7)
    graph = generate_topology(spec.n_nodes, spec.edge_density, root.child("simulate"))
    faults = schedule_faults(spec, graph, root.child("simulate"))
    stream = simulate(graph, faults, spec, root.child("simulate"))
    return spec, graph, faults, stream


@pytest.fixture(scope="session")
def tiny_bundle():
    """Preprocessed tiny dataset for fast end-to-end training tests."""
    bundle, result, raw = prepare_dataset(TINY_SPEC, dataset_seed=7)
    return bundle, result, raw


@pytest.fixture(scope="session")
def local_bundle():
    """The `local` preset dataset at dataset seed 0 (acceptance scale)."""
    bundle, result, raw = prepare_dataset(scenario_preset("local"), dataset_seed=0)
    return bundle, result, raw


@pytest.fixture(scope="session")
def local_ablate(local_bundle):
    """5-seed backbone ablation on the local preset (criterion 5 artifact)."""
    bundle, _, _ = local_bundle
    base = RunConfig(seed=0, task=Task.LOCALIZE)
    return ablate(bundle, base, seeds=[1, 2, 3, 4, 5])


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
