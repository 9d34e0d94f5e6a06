"""Neuron attribution: marginal contributions, Shapley values and
excitable-neuron selection.

The cooperative game treats each countable neuron as a player.  The utility of
a coalition is the loss change caused by an input perturbation, evaluated on a
network where every in-scope neuron outside the coalition is ablated.  Neurons
whose normalized Shapley value exceeds a threshold are "excitable".
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import engine
from .engine import NetworkModel, NeuronId

__all__ = [
    "AttributionError",
    "UtilityContext",
    "ShapleyReport",
    "ExcitableSet",
    "utility",
    "marginal_contribution",
    "shapley_exact",
    "shapley_sampled",
    "select_excitable",
]

EXACT_SCOPE_LIMIT = 20
DEFAULT_NOISE_SCALE = 0.05
MAX_ROWS_PER_CHUNK = 16384


class AttributionError(ValueError):
    """Raised on invalid coalitions, scopes or estimator parameters."""


@dataclass
class UtilityContext:
    """Fixes the game: model, seed input, label and the probe perturbation.

    If ``perturbation`` is None, ``noise_draws`` uniform perturbations in
    [-noise_scale, +noise_scale] are drawn from ``seed`` and the loss change is
    averaged over them; otherwise the given perturbation is used alone.
    """

    model: NetworkModel
    seed_input: np.ndarray
    label: int
    perturbation: np.ndarray | None = None
    noise_draws: int = 5
    noise_scale: float = DEFAULT_NOISE_SCALE
    seed: int = 0

    def __post_init__(self) -> None:
        self.seed_input = np.asarray(self.seed_input, dtype=np.float32)
        if self.seed_input.shape != self.model.input_shape:
            raise AttributionError(
                f"seed input shape {self.seed_input.shape} does not match model "
                f"input {self.model.input_shape}"
            )
        if self.perturbation is not None:
            self.perturbation = np.asarray(self.perturbation, dtype=np.float32)
            if self.perturbation.shape != self.seed_input.shape:
                raise AttributionError("perturbation shape must match the seed input")
        elif self.noise_draws < 1:
            raise AttributionError("noise_draws must be >= 1")

    def perturbations(self) -> np.ndarray:
        """(k, *input_shape) perturbations; k == 1 for a fixed perturbation."""
        if self.perturbation is not None:
            return self.perturbation[None]
        rng = np.random.default_rng(self.seed)
        return rng.uniform(
            -self.noise_scale,
            self.noise_scale,
            (self.noise_draws, *self.seed_input.shape),
        ).astype(np.float32)


@dataclass
class ShapleyReport:
    """Per-neuron attributed contributions and their [-1, 1] normalization."""

    values: dict[NeuronId, float]
    normalized_values: dict[NeuronId, float]
    estimator: str  # exact | permutation_sampled
    sample_count: int
    seed: int

    def max_abs(self) -> float:
        return max((abs(v) for v in self.values.values()), default=0.0)

    def to_json(self) -> str:
        rows = [
            {
                "layer": nid.layer_index,
                "unit": nid.unit_index,
                "value": self.values[nid],
                "normalized": self.normalized_values[nid],
            }
            for nid in sorted(self.values)
        ]
        return json.dumps(
            {
                "estimator": self.estimator,
                "sample_count": self.sample_count,
                "seed": self.seed,
                "neurons": rows,
            },
            indent=2,
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "ShapleyReport":
        d = json.loads(text)
        values = {
            NeuronId(r["layer"], r["unit"]): r["value"] for r in d["neurons"]
        }
        normalized = {
            NeuronId(r["layer"], r["unit"]): r["normalized"] for r in d["neurons"]
        }
        return ShapleyReport(
            values, normalized, d["estimator"], d["sample_count"], d["seed"]
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


@dataclass
class ExcitableSet:
    neurons: frozenset[NeuronId]
    lambda_threshold: float
    per_layer_counts: dict[int, int] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# batched coalition evaluation


def _scope_positions(
    model: NetworkModel, scope: Sequence[NeuronId]
) -> tuple[list[NeuronId], dict[int, list[int]]]:
    scope = list(scope)
    counts = dict(engine.countable_layers(model))
    per_layer: dict[int, list[int]] = {}
    for nid in scope:
        li, ui = int(nid[0]), int(nid[1])
        if li not in counts or not 0 <= ui < counts[li]:
            raise AttributionError(f"scope neuron {nid} does not address a valid neuron")
        per_layer.setdefault(li, []).append(ui)
    return scope, per_layer


def coalition_utilities(
    ctx: UtilityContext,
    scope: Sequence[NeuronId],
    member_matrix: np.ndarray,
) -> np.ndarray:
    """Utility of many coalitions at once.

    ``member_matrix`` is (n_coalitions, len(scope)) booleans: True where the
    scope neuron belongs to the coalition.  Scope neurons outside the coalition
    are ablated; out-of-scope neurons are never touched.
    """
    scope, _ = _scope_positions(ctx.model, scope)
    member_matrix = np.asarray(member_matrix, dtype=bool)
    n_coal = member_matrix.shape[0]
    counts = dict(engine.countable_layers(ctx.model))
    keep: dict[int, np.ndarray] = {}
    for li in {nid.layer_index for nid in scope}:
        keep[li] = np.ones((n_coal, counts[li]), dtype=np.float32)
    for pos, nid in enumerate(scope):
        off = ~member_matrix[:, pos]
        keep[nid.layer_index][off, nid.unit_index] = 0.0

    deltas = ctx.perturbations()
    base = ctx.seed_input[None]
    labels = np.full(n_coal, ctx.label)
    base_losses = _chunked_losses(ctx.model, np.repeat(base, n_coal, axis=0), labels, keep)
    util = np.zeros(n_coal, dtype=np.float64)
    for dx in deltas:
        pert = (ctx.seed_input + dx)[None]
        util += _chunked_losses(
            ctx.model, np.repeat(pert, n_coal, axis=0), labels, keep
        )
    return util / len(deltas) - base_losses


def _chunked_losses(model, xs, labels, keep) -> np.ndarray:
    n = len(xs)
    if n <= MAX_ROWS_PER_CHUNK:
        return engine.example_losses(model, xs, labels, keep)
    out = np.empty(n, dtype=np.float64)
    for lo in range(0, n, MAX_ROWS_PER_CHUNK):
        hi = min(lo + MAX_ROWS_PER_CHUNK, n)
        sub_keep = {li: k[lo:hi] for li, k in keep.items()} if keep else None
        out[lo:hi] = engine.example_losses(model, xs[lo:hi], labels[lo:hi], sub_keep)
    return out


# ---------------------------------------------------------------------------
# public operations


def utility(
    ctx: UtilityContext,
    coalition: Iterable[NeuronId],
    scope: Sequence[NeuronId] | None = None,
) -> float:
    """Loss change with every in-scope neuron outside the coalition ablated."""
    if scope is None:
        scope = engine.neuron_ids(ctx.model)
    coalition = set(coalition)
    if not coalition <= set(scope):
        raise AttributionError("coalition must be a subset of the scope")
    members = np.array([[nid in coalition for nid in scope]])
    return float(coalition_utilities(ctx, scope, members)[0])


def marginal_contribution(
    ctx: UtilityContext,
    n: NeuronId,
    s: Iterable[NeuronId],
    scope: Sequence[NeuronId] | None = None,
) -> float:
    """utility(s) - utility(s minus n)."""
    s = set(s)
    if n not in s:
        raise AttributionError(f"neuron {n} is not a member of the coalition")
    if scope is None:
        scope = engine.neuron_ids(ctx.model)
    members = np.array(
        [[nid in s for nid in scope], [nid in s and nid != n for nid in scope]]
    )
    u = coalition_utilities(ctx, scope, members)
    return float(u[0] - u[1])


def _report(values: dict[NeuronId, float], estimator, sample_count, seed) -> ShapleyReport:
    max_abs = max((abs(v) for v in values.values()), default=0.0)
    if max_abs > 0:
        normalized = {nid: v / max_abs for nid, v in values.items()}
    else:
        normalized = {nid: 0.0 for nid in values}
    return ShapleyReport(values, normalized, estimator, sample_count, seed)


def shapley_exact(
    ctx: UtilityContext, scope: Sequence[NeuronId]
) -> ShapleyReport:
    """Exact Shapley values by subset enumeration (scope of at most 20)."""
    scope = list(scope)
    m = len(scope)
    if m == 0:
        raise AttributionError("scope must be nonempty")
    if m > EXACT_SCOPE_LIMIT:
        raise AttributionError(
            f"scope of {m} exceeds the enumeration bound ({EXACT_SCOPE_LIMIT}); "
            "use shapley_sampled"
        )
    masks = np.arange(2**m, dtype=np.int64)
    members = ((masks[:, None] >> np.arange(m)) & 1).astype(bool)
    util = coalition_utilities(ctx, scope, members)
    sizes = members.sum(axis=1)
    # omega(|s|) = (|s|-1)! (m-|s|)! / m! = 1 / (m * C(m-1, |s|-1))
    weights = np.zeros(m + 1)
    for k in range(1, m + 1):
        weights[k] = 1.0 / (m * math.comb(m - 1, k - 1))
    values = {}
    for pos, nid in enumerate(scope):
        has_n = members[:, pos]
        with_n = masks[has_n]
        without = with_n & ~(1 << pos)
        contrib = (util[with_n] - util[without]) * weights[sizes[has_n]]
        values[nid] = float(contrib.sum())
    return _report(values, "exact", 2**m, ctx.seed)


def shapley_sampled(
    ctx: UtilityContext,
    scope: Sequence[NeuronId],
    sample_count: int,
    seed: int,
) -> ShapleyReport:
    """Monte Carlo permutation estimator; unbiased and seed-deterministic.

    For each sampled permutation the coalition grows one neuron at a time and
    each neuron is credited with its marginal contribution at insertion.
    """
    scope = list(scope)
    m = len(scope)
    if m == 0:
        raise AttributionError("scope must be nonempty")
    if sample_count < 1:
        raise AttributionError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    perms = np.array([rng.permutation(m) for _ in range(sample_count)])
    members = _prefix_member_matrix(perms, m)
    util = coalition_utilities(ctx, scope, members).reshape(sample_count, m + 1)
    marginals = np.diff(util, axis=1)  # (P, m): credit in permutation order
    totals = np.zeros(m, dtype=np.float64)
    for p in range(sample_count):
        totals[perms[p]] += marginals[p]
    totals /= sample_count
    values = {nid: float(totals[pos]) for pos, nid in enumerate(scope)}
    return _report(values, "permutation_sampled", sample_count, seed)


def _prefix_member_matrix(perms: np.ndarray, m: int) -> np.ndarray:
    """Coalition membership rows for all prefixes of all permutations.

    Row layout: for permutation p, rows p*(m+1) .. p*(m+1)+m are the prefixes
    of sizes 0..m.
    """
    sample_count = len(perms)
    members = np.zeros((sample_count * (m + 1), m), dtype=bool)
    for p in range(sample_count):
        base = p * (m + 1)
        for t in range(m):
            members[base + t + 1] = members[base + t]
            members[base + t + 1, perms[p, t]] = True
    return members


def select_excitable(
    report: ShapleyReport, lam: float, use_raw: bool = False
) -> ExcitableSet:
    """Neurons whose (normalized, by default) Shapley value exceeds lambda."""
    if not use_raw and not 0.0 <= lam <= 1.0:
        raise AttributionError("lambda must lie in [0, 1] for normalized selection")
    source = report.values if use_raw else report.normalized_values
    chosen = frozenset(nid for nid, v in source.items() if v > lam)
    per_layer: dict[int, int] = {}
    for nid in chosen:
        per_layer[nid.layer_index] = per_layer.get(nid.layer_index, 0) + 1
    return ExcitableSet(chosen, lam, per_layer)
