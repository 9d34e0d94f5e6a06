"""Quantitative evaluation: accuracy, FGSM/PGD attacks, attack success rate,
CLEVER-style L2 robustness estimation, coverage profiling and suite
error-category accounting."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import engine
from .engine import NetworkModel

__all__ = [
    "MetricsError",
    "CoverageProfile",
    "CleverEstimate",
    "SuiteReport",
    "accuracy",
    "attack_fgsm",
    "attack_pgd",
    "asr",
    "clever_l2",
    "coverage_profile",
    "suite_report",
]


class MetricsError(ValueError):
    """Raised on empty inputs or precondition violations."""


@dataclass
class CoverageProfile:
    """Per-neuron activation-summary bounds over a reference corpus."""

    low: dict[int, np.ndarray]  # layer_index -> (units,)
    high: dict[int, np.ndarray]
    corpus_size: int


@dataclass
class CleverEstimate:
    score: float
    batch_count: int
    samples_per_batch: int
    radius: float
    per_class: dict[int, float]
    predicted_class: int
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "score": self.score,
                "batch_count": self.batch_count,
                "samples_per_batch": self.samples_per_batch,
                "radius": self.radius,
                "predicted_class": self.predicted_class,
                "seed": self.seed,
                "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            },
            indent=2,
            sort_keys=True,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["target_class", "score"])
        for j, s in sorted(self.per_class.items()):
            w.writerow([j, s])
        return buf.getvalue()


@dataclass
class SuiteReport:
    test_error_count: int
    error_categories: set[tuple[int, int]]
    average_categories_per_seed: float
    per_seed: dict[int, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "test_error_count": self.test_error_count,
                "error_categories": sorted(list(self.error_categories)),
                "average_categories_per_seed": self.average_categories_per_seed,
                "per_seed": {
                    str(k): v for k, v in sorted(self.per_seed.items())
                },
            },
            indent=2,
            sort_keys=True,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["seed_index", "errors", "distinct_wrong_labels"])
        for k in sorted(self.per_seed):
            row = self.per_seed[k]
            w.writerow([k, row["errors"], row["distinct_wrong_labels"]])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


# ---------------------------------------------------------------------------


def accuracy(model: NetworkModel, data) -> float:
    """Fraction of the dataset's test split (or raw arrays) correctly classified."""
    if hasattr(data, "inputs"):
        xs, ys = data.inputs, data.labels
    else:
        xs, ys = data
    if len(xs) == 0:
        raise MetricsError("empty dataset")
    return float((engine.predict_batch(model, xs) == np.asarray(ys)).mean())


def attack_fgsm(
    model: NetworkModel,
    inputs: np.ndarray,
    labels: Sequence[int],
    epsilon: float,
) -> np.ndarray:
    """x + epsilon * sign(dL/dx), clamped to [0, 1].  Accepts batches."""
    if epsilon < 0:
        raise MetricsError("epsilon must be >= 0")
    xs, single = _as_batch(model, inputs)
    ys = np.atleast_1d(np.asarray(labels))
    if epsilon == 0:
        return xs[0] if single else xs.copy()
    grads = engine.input_gradients(model, xs, ys)
    adv = np.clip(xs + epsilon * np.sign(grads), 0.0, 1.0).astype(np.float32)
    return adv[0] if single else adv


def attack_pgd(
    model: NetworkModel,
    inputs: np.ndarray,
    labels: Sequence[int],
    epsilon: float,
    steps: int = 10,
    step_size: float | None = None,
) -> np.ndarray:
    """Iterated signed gradient ascent projected to the L-inf ball and [0, 1]."""
    if epsilon < 0:
        raise MetricsError("epsilon must be >= 0")
    if steps < 1:
        raise MetricsError("steps must be >= 1")
    if step_size is None:
        step_size = 2.5 * epsilon / steps
    xs, single = _as_batch(model, inputs)
    ys = np.atleast_1d(np.asarray(labels))
    if epsilon == 0:
        return xs[0] if single else xs.copy()
    adv = xs.copy()
    lo = np.clip(xs - epsilon, 0.0, 1.0)
    hi = np.clip(xs + epsilon, 0.0, 1.0)
    for _ in range(steps):
        grads = engine.input_gradients(model, adv, ys)
        adv = np.clip(adv + step_size * np.sign(grads), lo, hi).astype(np.float32)
    return adv[0] if single else adv


def _as_batch(model: NetworkModel, inputs: np.ndarray) -> tuple[np.ndarray, bool]:
    xs = np.asarray(inputs, dtype=np.float32)
    if xs.shape == model.input_shape:
        return xs[None], True
    return xs, False


def asr(
    model: NetworkModel, attacked: np.ndarray, labels: Sequence[int]
) -> float:
    """Attack success rate: fraction misclassified after the attack."""
    ys = np.asarray(labels)
    if len(ys) == 0:
        raise MetricsError("empty batch")
    return float((engine.predict_batch(model, attacked) != ys).mean())


def clever_l2(
    model: NetworkModel,
    x: np.ndarray,
    seed: int,
    batch_count: int = 500,
    samples_per_batch: int = 1024,
    radius: float = 0.5,
    true_label: int | None = None,
    weibull_fit: bool = False,
) -> CleverEstimate:
    """Untargeted L2 CLEVER-style robustness estimate.

    For each non-predicted class j the logit margin g = z_c - z_j is sampled on
    uniform points in the L2 ball of the given radius; the Lipschitz bound is
    the maximum of per-batch gradient-norm maxima (or the location parameter of
    a reverse-Weibull fit when ``weibull_fit`` is set) and the class score is
    g(x0) divided by that bound.  The overall score is the minimum over
    classes.  Deterministic given the seed.
    """
    if batch_count < 1 or samples_per_batch < 1:
        raise MetricsError("batch_count and samples_per_batch must be >= 1")
    if radius <= 0:
        raise MetricsError("radius must be > 0")
    x = np.asarray(x, dtype=np.float32)
    c = int(engine.predict_batch(model, x[None])[0])
    if true_label is not None and c != int(true_label):
        raise MetricsError(
            f"input is misclassified (predicted {c}, true {int(true_label)})"
        )
    dim = int(np.prod(x.shape))
    rng = np.random.default_rng(seed)
    per_class: dict[int, float] = {}
    for j in range(model.class_count):
        if j == c:
            continue
        coeffs = np.zeros(model.class_count)
        coeffs[c] = 1.0
        coeffs[j] = -1.0
        g0, _ = engine.logit_combination_input_grads(model, x[None], coeffs)
        maxima = np.empty(batch_count)
        for b in range(batch_count):
            pts = _uniform_l2_ball(rng, x, radius, samples_per_batch, dim)
            _, grads = engine.logit_combination_input_grads(model, pts, coeffs)
            norms = np.sqrt((grads.reshape(len(pts), -1) ** 2).sum(axis=1))
            maxima[b] = norms.max()
        lip = _lipschitz_estimate(maxima, weibull_fit)
        per_class[j] = float(g0[0] / lip) if lip > 0 else float("inf")
    score = min(per_class.values())
    return CleverEstimate(
        score=float(score),
        batch_count=batch_count,
        samples_per_batch=samples_per_batch,
        radius=radius,
        per_class=per_class,
        predicted_class=c,
        seed=seed,
    )


def _uniform_l2_ball(rng, x, radius, n, dim) -> np.ndarray:
    direction = rng.normal(size=(n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / dim)
    return (x.reshape(1, -1) + direction * r).reshape(n, *x.shape).astype(np.float32)


def _lipschitz_estimate(maxima: np.ndarray, weibull_fit: bool) -> float:
    if not weibull_fit or len(maxima) < 3 or np.ptp(maxima) == 0:
        return float(maxima.max())
    from scipy.stats import weibull_max

    _, loc, _ = weibull_max.fit(maxima)
    # the fitted location is the estimated upper endpoint of the maxima
    return float(max(loc, maxima.max()))


def coverage_profile(model: NetworkModel, corpus: np.ndarray) -> CoverageProfile:
    """Per-neuron min/max activation summaries over a reference corpus."""
    corpus = np.asarray(corpus, dtype=np.float32)
    if len(corpus) == 0:
        raise MetricsError("corpus must be nonempty")
    low: dict[int, np.ndarray] = {}
    high: dict[int, np.ndarray] = {}
    chunk = 1024
    for lo_i in range(0, len(corpus), chunk):
        summaries = engine.batch_summaries(model, corpus[lo_i : lo_i + chunk])
        for li, s in summaries.items():
            smin, smax = s.min(axis=0), s.max(axis=0)
            low[li] = np.minimum(low[li], smin) if li in low else smin
            high[li] = np.maximum(high[li], smax) if li in high else smax
    return CoverageProfile(low=low, high=high, corpus_size=len(corpus))


def suite_report(
    model: NetworkModel, suite: Iterable, seeds: Sequence
) -> SuiteReport:
    """Error and error-category accounting for a generated test suite.

    Errors are misclassified generated inputs; a category is a distinct
    ordered (true, predicted) label pair; the per-seed average counts distinct
    wrong predicted labels per benign seed.
    """
    cases = list(suite)
    if not cases:
        raise MetricsError("suite must be nonempty")
    n_seeds = len(seeds)
    errors = 0
    categories: set[tuple[int, int]] = set()
    per_seed_wrong: dict[int, set[int]] = {}
    per_seed_errors: dict[int, int] = {}
    for case in cases:
        if not case.is_error:
            continue
        errors += 1
        categories.add((case.true_label, case.predicted_label_on_generated))
        per_seed_wrong.setdefault(case.seed_index, set()).add(
            case.predicted_label_on_generated
        )
        per_seed_errors[case.seed_index] = per_seed_errors.get(case.seed_index, 0) + 1
    avg = sum(len(v) for v in per_seed_wrong.values()) / n_seeds if n_seeds else 0.0
    per_seed = {
        idx: {
            "errors": per_seed_errors.get(idx, 0),
            "distinct_wrong_labels": len(per_seed_wrong.get(idx, set())),
        }
        for idx in sorted({c.seed_index for c in cases})
    }
    return SuiteReport(
        test_error_count=errors,
        error_categories=categories,
        average_categories_per_seed=float(avg),
        per_seed=per_seed,
    )
