"""Test-example generation: particle swarm search over input perturbations.

The default fitness is the excitable-neuron ratio: the fraction of all
countable neurons whose (normalized) Shapley value toward the loss change
caused by the candidate's perturbation exceeds the threshold lambda.  Neuron
coverage and SNAC gain are available as baseline fitness functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import attribution, engine
from .attribution import _prefix_member_matrix
from .engine import NetworkModel, NeuronId

__all__ = [
    "FuzzError",
    "FuzzConfig",
    "Particle",
    "SwarmState",
    "TestCase",
    "SuiteResult",
    "stratified_scope",
    "ExcitableFitness",
    "CachedExcitableFitness",
    "NeuronCoverageFitness",
    "SnacFitness",
    "fitness_excitable",
    "fitness_coverage",
    "init_swarm",
    "pso_step",
    "generate",
    "generate_suite",
    "random_baseline_suite",
]

FITNESS_KINDS = ("excitable", "excitable_cached", "neuron_coverage", "snac")


class FuzzError(ValueError):
    """Raised on invalid configurations or misclassified seeds."""


@dataclass(frozen=True)
class FuzzConfig:
    population_size: int = 100
    max_iterations: int = 10  # G_k; comparison runs use 20
    c1: float = 2.0
    c2: float = 2.0
    omega_initial: float = 0.4
    omega_end: float = 0.9
    epsilon: float = 1.0  # fitness threshold for early termination
    linf_budget: float = 0.1
    velocity_clamp: float = 0.05
    lam: float = 0.5  # excitable-neuron threshold
    fitness_kind: str = "excitable"
    seed: int = 0
    # Shapley estimation inside the excitable fitness
    shapley_samples: int = 30
    scope_limit: int = 32
    nc_threshold: float = 0.5
    random_init: bool = True

    def __post_init__(self) -> None:
        if self.population_size < 1:
            raise FuzzError("population_size must be >= 1")
        if not 0.0 < self.linf_budget <= 1.0:
            raise FuzzError("linf_budget must lie in (0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise FuzzError("epsilon must lie in [0, 1]")
        if self.fitness_kind not in FITNESS_KINDS:
            raise FuzzError(f"fitness_kind must be one of {FITNESS_KINDS}")


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    best_position: np.ndarray
    best_fitness: float


@dataclass
class SwarmState:
    """Vectorized swarm: row p of each array is particle p."""

    seed_input: np.ndarray
    positions: np.ndarray  # (P, *shape)
    velocities: np.ndarray
    best_positions: np.ndarray
    best_fitness: np.ndarray  # (P,)
    global_best_position: np.ndarray
    global_best_fitness: float
    iteration: int
    fitness_history: list[float]
    eval_count: int
    rng: np.random.Generator

    @property
    def particles(self) -> list[Particle]:
        return [
            Particle(
                self.positions[p],
                self.velocities[p],
                self.best_positions[p],
                float(self.best_fitness[p]),
            )
            for p in range(len(self.positions))
        ]


@dataclass
class TestCase:
    seed_input: np.ndarray
    generated_input: np.ndarray
    true_label: int
    predicted_label_on_seed: int
    predicted_label_on_generated: int
    final_fitness: float
    iterations_used: int
    fitness_kind: str
    seed_index: int = -1
    fitness_history: list[float] = field(default_factory=list)
    evaluations: int = 0
    intermediate: bool = False

    @property
    def is_error(self) -> bool:
        return self.predicted_label_on_generated != self.true_label


@dataclass
class SuiteResult:
    cases: list[TestCase]
    failures: list[dict]

    def __iter__(self):
        return iter(self.cases)

    def __len__(self) -> int:
        return len(self.cases)


# ---------------------------------------------------------------------------
# fitness functions (all operate on candidate batches)


def stratified_scope(
    model: NetworkModel, limit: int, seed: int
) -> list[NeuronId]:
    """Layer-stratified neuron scope of at most ``limit`` neurons.

    Every countable layer keeps at least one neuron; the remaining slots are
    allocated proportionally to layer sizes.  Deterministic given the seed.
    """
    layers = engine.countable_layers(model)
    total = sum(n for _, n in layers)
    if total <= limit:
        return engine.neuron_ids(model)
    rng = np.random.default_rng(seed)
    alloc = {li: 1 for li, _ in layers}
    remaining = limit - len(layers)
    weights = np.array([n for _, n in layers], dtype=np.float64)
    shares = np.floor(remaining * weights / weights.sum()).astype(int)
    for (li, n), extra in zip(layers, shares):
        alloc[li] = min(n, alloc[li] + int(extra))
    # hand out leftover slots to the largest layers first
    leftovers = limit - sum(alloc.values())
    for li, n in sorted(layers, key=lambda t: -t[1]):
        while leftovers > 0 and alloc[li] < n:
            alloc[li] += 1
            leftovers -= 1
    scope = []
    for li, n in layers:
        units = rng.choice(n, size=alloc[li], replace=False)
        scope.extend(NeuronId(li, int(u)) for u in sorted(units))
    return scope


class ExcitableFitness:
    """Excitable-neuron ratio, recomputed per candidate.

    The scope and the permutation set are fixed once per seed example so that
    the seed-side coalition losses can be cached; each candidate only pays for
    the perturbed-side evaluations.

    A neuron counts as excitable when its Shapley value exceeds lambda times a
    per-seed reference scale: the largest attribution magnitude observed under
    small random probe noise around the seed.  The reference is fixed once per
    seed, so candidates that cause larger loss changes excite more neurons and
    the fitness is exactly 0 for the unperturbed seed.
    """

    PROBE_DRAWS = 4
    PROBE_SCALE = 0.05

    def __init__(
        self,
        model: NetworkModel,
        seed_input: np.ndarray,
        label: int,
        lam: float = 0.5,
        sample_count: int = 30,
        scope_limit: int = 32,
        seed: int = 0,
    ):
        self.model = model
        self.seed_input = np.asarray(seed_input, dtype=np.float32)
        self.label = int(label)
        self.lam = float(lam)
        self.total_neurons = engine.neuron_count(model)
        self.scope = stratified_scope(model, scope_limit, seed)
        self.m = len(self.scope)
        rng = np.random.default_rng(seed + 1)
        self.perms = np.array([rng.permutation(self.m) for _ in range(sample_count)])
        self.sample_count = sample_count
        members = _prefix_member_matrix(self.perms, self.m)
        self.n_coal = len(members)
        counts = dict(engine.countable_layers(model))
        self.keep: dict[int, np.ndarray] = {}
        for li in {nid.layer_index for nid in self.scope}:
            self.keep[li] = np.ones((self.n_coal, counts[li]), dtype=np.float32)
        for pos, nid in enumerate(self.scope):
            off = ~members[:, pos]
            self.keep[nid.layer_index][off, nid.unit_index] = 0.0
        labels = np.full(self.n_coal, self.label)
        self.base_losses = attribution._chunked_losses(
            model,
            np.repeat(self.seed_input[None], self.n_coal, axis=0),
            labels,
            self.keep,
        )
        probe_rng = np.random.default_rng(seed + 2)
        probes = self.seed_input[None] + probe_rng.uniform(
            -self.PROBE_SCALE, self.PROBE_SCALE,
            (self.PROBE_DRAWS, *self.seed_input.shape),
        ).astype(np.float32)
        self.reference_scale = float(np.abs(self._psi(probes)).max())

    def shapley_values(self, candidate: np.ndarray) -> np.ndarray:
        """Per-scope-neuron Shapley values for one candidate (m,)."""
        return self._psi(np.asarray(candidate, dtype=np.float32)[None])[0]

    def _psi(self, candidates: np.ndarray) -> np.ndarray:
        n_cand = len(candidates)
        xs = np.repeat(candidates, self.n_coal, axis=0)
        keep = {li: np.tile(k, (n_cand, 1)) for li, k in self.keep.items()}
        labels = np.full(len(xs), self.label)
        losses = attribution._chunked_losses(self.model, xs, labels, keep)
        util = losses.reshape(n_cand, self.sample_count, self.m + 1)
        util = util - self.base_losses.reshape(1, self.sample_count, self.m + 1)
        marginals = np.diff(util, axis=2)  # (n_cand, P, m) in permutation order
        psi = np.zeros((n_cand, self.m), dtype=np.float64)
        for p in range(self.sample_count):
            psi[:, self.perms[p]] += marginals[:, p]
        return psi / self.sample_count

    def __call__(self, candidates: np.ndarray) -> np.ndarray:
        psi = self._psi(np.asarray(candidates, dtype=np.float32))
        threshold = self.lam * self.reference_scale
        excitable = (psi > threshold).sum(axis=1)
        if threshold <= 0.0:
            # degenerate seed with no probe response: count strictly positive
            excitable = (psi > 0.0).sum(axis=1)
        return excitable / self.total_neurons


class CachedExcitableFitness:
    """Cheap mode: the excitable set is fixed from an initial noise probe and
    fitness is the fraction of that set with positive activation summary."""

    def __init__(
        self,
        model: NetworkModel,
        seed_input: np.ndarray,
        label: int,
        lam: float = 0.5,
        sample_count: int = 30,
        scope_limit: int = 32,
        seed: int = 0,
    ):
        self.model = model
        ctx = attribution.UtilityContext(
            model, np.asarray(seed_input, dtype=np.float32), label, seed=seed
        )
        scope = stratified_scope(model, scope_limit, seed)
        report = attribution.shapley_sampled(ctx, scope, sample_count, seed + 1)
        excited = attribution.select_excitable(report, lam)
        self.targets = sorted(excited.neurons)

    def __call__(self, candidates: np.ndarray) -> np.ndarray:
        if not self.targets:
            return np.zeros(len(candidates))
        summaries = engine.batch_summaries(self.model, candidates)
        hits = np.zeros(len(candidates), dtype=np.float64)
        for nid in self.targets:
            hits += summaries[nid.layer_index][:, nid.unit_index] > 0
        return hits / len(self.targets)


class NeuronCoverageFitness:
    """Fraction of neurons whose per-layer min-max scaled summary exceeds t."""

    def __init__(self, model: NetworkModel, threshold: float = 0.5):
        self.model = model
        self.threshold = threshold
        self.total = engine.neuron_count(model)

    def __call__(self, candidates: np.ndarray) -> np.ndarray:
        summaries = engine.batch_summaries(self.model, np.asarray(candidates, np.float32))
        covered = np.zeros(len(candidates), dtype=np.float64)
        for s in summaries.values():
            lo = s.min(axis=1, keepdims=True)
            hi = s.max(axis=1, keepdims=True)
            span = np.where(hi > lo, hi - lo, 1.0)
            scaled = np.where(hi > lo, (s - lo) / span, 0.0)
            covered += (scaled > self.threshold).sum(axis=1)
        return covered / self.total


class SnacFitness:
    """Fraction of neurons whose summary exceeds its corpus upper bound."""

    def __init__(self, model: NetworkModel, profile):
        if profile is None:
            raise FuzzError("SNAC fitness requires a coverage profile")
        self.model = model
        self.profile = profile
        self.total = engine.neuron_count(model)

    def __call__(self, candidates: np.ndarray) -> np.ndarray:
        summaries = engine.batch_summaries(self.model, np.asarray(candidates, np.float32))
        exceeded = np.zeros(len(candidates), dtype=np.float64)
        for li, s in summaries.items():
            exceeded += (s > self.profile.high[li][None, :]).sum(axis=1)
        return exceeded / self.total


def fitness_excitable(
    model: NetworkModel,
    seed_input: np.ndarray,
    candidate: np.ndarray,
    label: int,
    lam: float = 0.5,
    shapley_params: dict | None = None,
) -> float:
    """Excitable-neuron ratio of a single candidate relative to its seed."""
    params = {"sample_count": 30, "scope_limit": 32, "seed": 0}
    params.update(shapley_params or {})
    fn = ExcitableFitness(
        model,
        seed_input,
        label,
        lam=lam,
        sample_count=params["sample_count"],
        scope_limit=params["scope_limit"],
        seed=params["seed"],
    )
    return float(fn(np.asarray(candidate, dtype=np.float32)[None])[0])


def fitness_coverage(
    model: NetworkModel,
    corpus_profile,
    candidate: np.ndarray,
    kind: str,
    threshold: float = 0.5,
) -> float:
    """Coverage-style baseline fitness of a single candidate."""
    if kind == "neuron_coverage":
        fn = NeuronCoverageFitness(model, threshold)
    elif kind == "snac":
        fn = SnacFitness(model, corpus_profile)
    else:
        raise FuzzError(f"unknown coverage kind {kind!r}")
    return float(fn(np.asarray(candidate, dtype=np.float32)[None])[0])


def make_fitness(
    model: NetworkModel,
    seed_input: np.ndarray,
    label: int,
    cfg: FuzzConfig,
    profile=None,
) -> Callable[[np.ndarray], np.ndarray]:
    if cfg.fitness_kind == "excitable":
        return ExcitableFitness(
            model,
            seed_input,
            label,
            lam=cfg.lam,
            sample_count=cfg.shapley_samples,
            scope_limit=cfg.scope_limit,
            seed=cfg.seed,
        )
    if cfg.fitness_kind == "excitable_cached":
        return CachedExcitableFitness(
            model,
            seed_input,
            label,
            lam=cfg.lam,
            sample_count=cfg.shapley_samples,
            scope_limit=cfg.scope_limit,
            seed=cfg.seed,
        )
    if cfg.fitness_kind == "neuron_coverage":
        return NeuronCoverageFitness(model, cfg.nc_threshold)
    return SnacFitness(model, profile)


# ---------------------------------------------------------------------------
# particle swarm


def _feasible(x: np.ndarray, seed_input: np.ndarray, budget: float) -> np.ndarray:
    lo = np.maximum(0.0, seed_input - budget)
    hi = np.minimum(1.0, seed_input + budget)
    return np.clip(x, lo, hi)


def init_swarm(
    seed_input: np.ndarray, cfg: FuzzConfig, rng: np.random.Generator
) -> SwarmState:
    """Random positions within the feasible ball and small random velocities.

    With cfg.random_init off, all particles start exactly at the seed.
    """
    seed_input = np.asarray(seed_input, dtype=np.float32)
    shape = (cfg.population_size, *seed_input.shape)
    if cfg.random_init:
        offsets = rng.uniform(-cfg.linf_budget, cfg.linf_budget, shape)
    else:
        offsets = np.zeros(shape)
    positions = _feasible(seed_input[None] + offsets, seed_input[None], cfg.linf_budget)
    velocities = rng.uniform(-cfg.velocity_clamp, cfg.velocity_clamp, shape)
    return SwarmState(
        seed_input=seed_input,
        positions=positions.astype(np.float32),
        velocities=velocities.astype(np.float32),
        best_positions=positions.astype(np.float32).copy(),
        best_fitness=np.full(cfg.population_size, -np.inf),
        global_best_position=positions[0].astype(np.float32).copy(),
        global_best_fitness=-np.inf,
        iteration=0,
        fitness_history=[],
        eval_count=0,
        rng=rng,
    )


def _evaluate_and_update(state: SwarmState, fitness) -> None:
    fits = np.asarray(fitness(state.positions), dtype=np.float64)
    state.eval_count += len(fits)
    improved = fits > state.best_fitness
    state.best_positions[improved] = state.positions[improved]
    state.best_fitness[improved] = fits[improved]
    top = int(np.argmax(state.best_fitness))
    if state.best_fitness[top] > state.global_best_fitness:
        state.global_best_fitness = float(state.best_fitness[top])
        state.global_best_position = state.best_positions[top].copy()
    state.fitness_history.append(state.global_best_fitness)


def pso_step(
    state: SwarmState,
    cfg: FuzzConfig,
    fitness: Callable[[np.ndarray], np.ndarray],
    rand_fn: Callable[[tuple], np.ndarray] | None = None,
) -> SwarmState:
    """One swarm iteration: inertia-weighted velocity update, move, clamp,
    evaluate, update personal/global bests, advance the iteration counter."""
    g = state.iteration
    gk = cfg.max_iterations
    omega = (cfg.omega_initial - cfg.omega_end) * (gk - g) / gk + cfg.omega_end
    if rand_fn is None:
        rand_fn = lambda shape: state.rng.uniform(0.0, 1.0, shape)
    shape = state.positions.shape
    r1 = rand_fn(shape)
    r2 = rand_fn(shape)
    v = (
        omega * state.velocities
        + cfg.c1 * r1 * (state.best_positions - state.positions)
        + cfg.c2 * r2 * (state.global_best_position[None] - state.positions)
    )
    v = np.clip(v, -cfg.velocity_clamp, cfg.velocity_clamp)
    x = state.positions + v
    x = _feasible(x, state.seed_input[None], cfg.linf_budget)
    state.velocities = v.astype(np.float32)
    state.positions = x.astype(np.float32)
    state.iteration = g + 1
    _evaluate_and_update(state, fitness)
    return state


def generate(
    model: NetworkModel,
    seed_input: np.ndarray,
    label: int,
    cfg: FuzzConfig,
    fitness: Callable[[np.ndarray], np.ndarray] | None = None,
    profile=None,
    allow_misclassified: bool = False,
    collect_intermediates: bool = False,
    seed_index: int = -1,
) -> TestCase | tuple[TestCase, list[TestCase]]:
    """Run the swarm for one seed; deterministic given cfg.seed.

    With ``collect_intermediates``, every iteration's global-best intermediate
    that misclassifies is returned alongside the final test case.
    """
    seed_input = np.asarray(seed_input, dtype=np.float32)
    label = int(label)
    seed_pred = int(engine.predict_batch(model, seed_input[None])[0])
    if seed_pred != label and not allow_misclassified:
        raise FuzzError(
            f"seed is misclassified (predicted {seed_pred}, true {label}); "
            "pass allow_misclassified to override"
        )
    if fitness is None:
        fitness = make_fitness(model, seed_input, label, cfg, profile)
    rng = np.random.default_rng(cfg.seed)
    state = init_swarm(seed_input, cfg, rng)
    _evaluate_and_update(state, fitness)  # initialization evaluation
    intermediates: list[TestCase] = []

    def snapshot() -> TestCase | None:
        pred = int(engine.predict_batch(model, state.global_best_position[None])[0])
        if pred == label:
            return None
        return TestCase(
            seed_input=seed_input,
            generated_input=state.global_best_position.copy(),
            true_label=label,
            predicted_label_on_seed=seed_pred,
            predicted_label_on_generated=pred,
            final_fitness=state.global_best_fitness,
            iterations_used=state.iteration,
            fitness_kind=cfg.fitness_kind,
            seed_index=seed_index,
            evaluations=state.eval_count,
            intermediate=True,
        )

    while state.iteration < cfg.max_iterations and not (
        state.global_best_fitness > cfg.epsilon
    ):
        pso_step(state, cfg, fitness)
        if collect_intermediates and state.iteration < cfg.max_iterations:
            case = snapshot()
            if case is not None:
                intermediates.append(case)
    final_pred = int(engine.predict_batch(model, state.global_best_position[None])[0])
    final = TestCase(
        seed_input=seed_input,
        generated_input=state.global_best_position.copy(),
        true_label=label,
        predicted_label_on_seed=seed_pred,
        predicted_label_on_generated=final_pred,
        final_fitness=state.global_best_fitness,
        iterations_used=state.iteration,
        fitness_kind=cfg.fitness_kind,
        seed_index=seed_index,
        fitness_history=list(state.fitness_history),
        evaluations=state.eval_count,
    )
    if collect_intermediates:
        return final, intermediates
    return final


def generate_suite(
    model: NetworkModel,
    seeds: Sequence[np.ndarray],
    labels: Sequence[int],
    cfg: FuzzConfig,
    collect_intermediates: bool = False,
    profile=None,
) -> SuiteResult:
    """Per-seed generation; failures are recorded and the suite continues."""
    if len(seeds) == 0:
        raise FuzzError("seeds must be nonempty")
    cases: list[TestCase] = []
    failures: list[dict] = []
    for idx, (x, y) in enumerate(zip(seeds, labels)):
        per_seed = replace(cfg, seed=cfg.seed + 1000 * idx)
        try:
            result = generate(
                model,
                x,
                int(y),
                per_seed,
                profile=profile,
                collect_intermediates=collect_intermediates,
                seed_index=idx,
            )
        except FuzzError as exc:
            failures.append({"seed_index": idx, "error": str(exc)})
            continue
        if collect_intermediates:
            final, inter = result
            cases.extend(inter)
            cases.append(final)
        else:
            cases.append(result)
    return SuiteResult(cases, failures)


def random_baseline_suite(
    model: NetworkModel,
    seeds: Sequence[np.ndarray],
    labels: Sequence[int],
    cfg: FuzzConfig,
) -> SuiteResult:
    """Unguided baseline with the same candidate budget as a swarm run.

    Per seed it draws population_size uniform candidates from the feasible
    ball in each of max_iterations + 1 rounds (matching the swarm's
    initialization plus iteration evaluations) and records one candidate per
    round as a test case.
    """
    if len(seeds) == 0:
        raise FuzzError("seeds must be nonempty")
    cases: list[TestCase] = []
    failures: list[dict] = []
    for idx, (x, y) in enumerate(zip(seeds, labels)):
        x = np.asarray(x, dtype=np.float32)
        y = int(y)
        seed_pred = int(engine.predict_batch(model, x[None])[0])
        if seed_pred != y:
            failures.append({"seed_index": idx, "error": "seed misclassified"})
            continue
        rng = np.random.default_rng(cfg.seed + 1000 * idx)
        for round_no in range(cfg.max_iterations + 1):
            draws = rng.uniform(
                -cfg.linf_budget, cfg.linf_budget, (cfg.population_size, *x.shape)
            )
            candidates = _feasible(x[None] + draws, x[None], cfg.linf_budget).astype(
                np.float32
            )
            engine.predict_batch(model, candidates)  # budget parity with the swarm
            chosen = candidates[0]
            pred = int(engine.predict_batch(model, chosen[None])[0])
            cases.append(
                TestCase(
                    seed_input=x,
                    generated_input=chosen,
                    true_label=y,
                    predicted_label_on_seed=seed_pred,
                    predicted_label_on_generated=pred,
                    final_fitness=0.0,
                    iterations_used=round_no,
                    fitness_kind="random",
                    seed_index=idx,
                    evaluations=cfg.population_size,
                    intermediate=round_no < cfg.max_iterations,
                )
            )
    return SuiteResult(cases, failures)
