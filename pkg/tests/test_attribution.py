import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from excitest import attribution, engine
from excitest.attribution import (
    ExcitableSet,
    ShapleyReport,
    UtilityContext,
    select_excitable,
    shapley_exact,
    shapley_sampled,
)
from excitest.engine import NeuronId
from conftest import make_mlp_model


@pytest.fixture(scope="module")
def toy():
    """3 hidden neurons, fixed perturbation, deterministic game."""
    rng = np.random.default_rng(11)
    model = make_mlp_model(
        rng.normal(0, 0.8, (4, 3)),
        rng.normal(0, 0.2, 3),
        rng.normal(0, 0.8, (3, 3)),
        rng.normal(0, 0.2, 3),
    )
    x = rng.uniform(0.2, 0.8, 4).astype(np.float32)
    dx = rng.uniform(-0.1, 0.1, 4).astype(np.float32)
    ctx = UtilityContext(model, x, label=1, perturbation=dx)
    scope = [NeuronId(0, 0), NeuronId(0, 1), NeuronId(0, 2)]
    return ctx, scope


def _oracle_utilities(ctx, scope):
    """Coalition utilities via the plain single-example loss path: ablate the
    in-scope complement, compare perturbed and clean loss."""
    out = {}
    x = ctx.seed_input
    dx = ctx.perturbation
    for r in range(len(scope) + 1):
        for combo in itertools.combinations(scope, r):
            mask = [n for n in scope if n not in combo]
            u = engine.loss(ctx.model, x + dx, ctx.label, mask=mask) - engine.loss(
                ctx.model, x, ctx.label, mask=mask
            )
            out[frozenset(combo)] = u
    return out


def _oracle_shapley(ctx, scope):
    """Direct weighted-marginal formula over the enumerated utilities."""
    util = _oracle_utilities(ctx, scope)
    m = len(scope)
    values = {}
    for n in scope:
        total = 0.0
        for s, u in util.items():
            if n not in s:
                continue
            k = len(s)
            weight = (
                math.factorial(k - 1) * math.factorial(m - k) / math.factorial(m)
            )
            total += weight * (u - util[s - {n}])
        values[n] = total
    return values, util


def test_utility_matches_single_example_oracle(toy):
    ctx, scope = toy
    oracle = _oracle_utilities(ctx, scope)
    for coalition, expect in oracle.items():
        got = attribution.utility(ctx, coalition, scope)
        assert got == pytest.approx(expect, abs=1e-9)


def test_marginal_contribution_matches_difference(toy):
    ctx, scope = toy
    oracle = _oracle_utilities(ctx, scope)
    s = frozenset(scope[:2])
    n = scope[0]
    expect = oracle[s] - oracle[s - {n}]
    assert attribution.marginal_contribution(ctx, n, s, scope) == pytest.approx(
        expect, abs=1e-9
    )


def test_marginal_requires_membership(toy):
    ctx, scope = toy
    with pytest.raises(attribution.AttributionError):
        attribution.marginal_contribution(ctx, scope[2], scope[:2], scope)


def test_exact_shapley_matches_enumeration_oracle(toy):
    ctx, scope = toy
    expect, _ = _oracle_shapley(ctx, scope)
    report = shapley_exact(ctx, scope)
    for n in scope:
        assert report.values[n] == pytest.approx(expect[n], abs=1e-9)


def test_efficiency_axiom(toy):
    ctx, scope = toy
    report = shapley_exact(ctx, scope)
    grand = attribution.utility(ctx, scope, scope)
    empty = attribution.utility(ctx, [], scope)
    assert sum(report.values.values()) == pytest.approx(grand - empty, abs=1e-9)


def test_null_player_axiom():
    # hidden unit 2 has zero outgoing weights: it cannot affect the loss
    rng = np.random.default_rng(3)
    w2 = rng.normal(0, 0.8, (3, 3))
    w2[2, :] = 0.0
    model = make_mlp_model(
        rng.normal(0, 0.8, (4, 3)), rng.normal(0, 0.2, 3), w2, rng.normal(0, 0.2, 3)
    )
    x = rng.uniform(0.2, 0.8, 4).astype(np.float32)
    dx = rng.uniform(-0.1, 0.1, 4).astype(np.float32)
    ctx = UtilityContext(model, x, 0, perturbation=dx)
    scope = [NeuronId(0, 0), NeuronId(0, 1), NeuronId(0, 2)]
    report = shapley_exact(ctx, scope)
    assert report.values[NeuronId(0, 2)] == pytest.approx(0.0, abs=1e-9)


def test_symmetry_axiom():
    # hidden units 0 and 1 are exact clones (same in and out weights)
    rng = np.random.default_rng(7)
    w1 = rng.normal(0, 0.8, (4, 3))
    w1[:, 1] = w1[:, 0]
    b1 = rng.normal(0, 0.2, 3)
    b1[1] = b1[0]
    w2 = rng.normal(0, 0.8, (3, 3))
    w2[1, :] = w2[0, :]
    model = make_mlp_model(w1, b1, w2, rng.normal(0, 0.2, 3))
    x = rng.uniform(0.2, 0.8, 4).astype(np.float32)
    dx = rng.uniform(-0.1, 0.1, 4).astype(np.float32)
    ctx = UtilityContext(model, x, 2, perturbation=dx)
    scope = [NeuronId(0, 0), NeuronId(0, 1), NeuronId(0, 2)]
    report = shapley_exact(ctx, scope)
    assert report.values[NeuronId(0, 0)] == pytest.approx(
        report.values[NeuronId(0, 1)], abs=1e-9
    )


def test_sampled_estimator_approaches_exact(toy):
    ctx, scope = toy
    exact = shapley_exact(ctx, scope)
    sampled = shapley_sampled(ctx, scope, sample_count=300, seed=0)
    tol = 0.05 * max(exact.max_abs(), 1e-12)
    for n in scope:
        assert abs(sampled.values[n] - exact.values[n]) <= tol


def test_sampled_estimator_is_seed_deterministic(toy):
    ctx, scope = toy
    a = shapley_sampled(ctx, scope, 50, seed=4)
    b = shapley_sampled(ctx, scope, 50, seed=4)
    assert a.values == b.values
    c = shapley_sampled(ctx, scope, 50, seed=5)
    assert a.values != c.values


def test_sampled_estimator_preserves_efficiency(toy):
    # telescoping prefix marginals make efficiency exact per permutation
    ctx, scope = toy
    report = shapley_sampled(ctx, scope, 7, seed=2)
    grand = attribution.utility(ctx, scope, scope)
    empty = attribution.utility(ctx, [], scope)
    assert sum(report.values.values()) == pytest.approx(grand - empty, abs=1e-9)


def test_zero_perturbation_yields_zero_values(toy):
    ctx, scope = toy
    zero_ctx = UtilityContext(
        ctx.model, ctx.seed_input, ctx.label, perturbation=np.zeros(4, np.float32)
    )
    report = shapley_exact(zero_ctx, scope)
    assert all(v == 0.0 for v in report.values.values())
    assert all(v == 0.0 for v in report.normalized_values.values())


def test_exact_enumeration_bound_enforced(toy):
    ctx, _ = toy
    big_scope = [NeuronId(0, 0)] * 21
    with pytest.raises(attribution.AttributionError, match="enumeration bound"):
        shapley_exact(ctx, big_scope)


def test_scope_validation(toy):
    ctx, scope = toy
    with pytest.raises(attribution.AttributionError):
        attribution.utility(ctx, [NeuronId(0, 9)], [NeuronId(0, 9)])
    with pytest.raises(attribution.AttributionError):
        attribution.utility(ctx, [NeuronId(2, 0)], scope)  # not in the scope


def test_noise_draw_context_is_deterministic(blobs_model, blobs_data):
    x, y = blobs_data.inputs[0], int(blobs_data.labels[0])
    scope = [NeuronId(1, 0), NeuronId(1, 1), NeuronId(1, 2)]
    a = shapley_exact(UtilityContext(blobs_model, x, y, seed=9), scope)
    b = shapley_exact(UtilityContext(blobs_model, x, y, seed=9), scope)
    assert a.values == b.values


def _report_from(norm_values):
    values = dict(norm_values)
    return ShapleyReport(values, dict(norm_values), "exact", 0, 0)


def test_threshold_selection_arithmetic():
    report = _report_from(
        {NeuronId(1, 0): 0.7, NeuronId(1, 1): 0.2, NeuronId(1, 2): 0.55}
    )
    chosen = select_excitable(report, 0.5)
    assert chosen.neurons == {NeuronId(1, 0), NeuronId(1, 2)}
    assert chosen.per_layer_counts == {1: 2}
    # strict inequality at the boundary
    at_boundary = select_excitable(report, 0.7)
    assert at_boundary.neurons == set()


def test_threshold_monotonicity():
    rng = np.random.default_rng(0)
    report = _report_from(
        {NeuronId(1, i): float(v) for i, v in enumerate(rng.uniform(-1, 1, 20))}
    )
    prev = None
    for lam in np.linspace(0.1, 0.9, 9):
        current = select_excitable(report, float(lam)).neurons
        if prev is not None:
            assert current <= prev
        prev = current


def test_normalization_lands_in_unit_interval(toy):
    ctx, scope = toy
    report = shapley_exact(ctx, scope)
    top = max(abs(v) for v in report.normalized_values.values())
    assert top == pytest.approx(1.0, abs=1e-12)
    assert all(-1.0 <= v <= 1.0 for v in report.normalized_values.values())


def test_report_json_round_trip(toy):
    ctx, scope = toy
    report = shapley_exact(ctx, scope)
    back = ShapleyReport.from_json(report.to_json())
    assert back.values == report.values
    assert back.estimator == report.estimator


@settings(max_examples=15, deadline=None)
@given(lam=st.floats(0.0, 0.999))
def test_selected_neurons_always_exceed_lambda(toy, lam):
    ctx, scope = toy
    report = shapley_exact(ctx, scope)
    chosen = select_excitable(report, lam)
    for nid in chosen.neurons:
        assert report.normalized_values[nid] > lam
    for nid in set(scope) - chosen.neurons:
        assert report.normalized_values[nid] <= lam
