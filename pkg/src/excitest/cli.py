"""Command-line surface for end-to-end workflows.

Subcommands: train, fuzz, retrain, probe, clever, report.  Every command
writes a run manifest next to its primary artifact with the fully resolved
configuration so reruns are reproducible.  Exit codes: 0 success, 1 usage
error, 2 data/model error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, attribution, engine, fuzzer, metrics, store

USAGE_ERROR = 1
DATA_ERROR = 2
INTERNAL_ERROR = 3

ARCHES = {
    "mlp64": lambda shape, classes: store.mlp_arch(shape, hidden=32, classes=classes),
    "mlp128": lambda shape, classes: store.mlp_arch(shape, hidden=64, classes=classes),
    "convnet": lambda shape, classes: store.convnet_arch(shape, classes=classes),
}


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_manifest(command: str, args: argparse.Namespace, out: Path, started: float):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": command,
        "config": resolved,
        "tool_version": __version__,
        "duration_seconds": round(time.time() - started, 3),
    }
    _atomic_write(
        out.with_suffix(out.suffix + ".manifest.json"),
        json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n",
    )


def _load_data(path: str, fmt: str) -> store.Dataset:
    if path == "digits":
        return store.digits_dataset()
    return store.load_dataset(path, fmt)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    started = time.time()
    data = _load_data(args.data, args.format)
    regime_kw = dict(
        epoch_count=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
    )
    if args.regime == "polluted":
        regime = store.DefectSpec(
            kind="polluted",
            alpha_fraction=args.alpha,
            patch_min=args.patch_min,
            patch_max=args.patch_max,
            target_class=args.target_class,
            **regime_kw,
        )
    else:
        kind = {"well": "well_trained", "under": "underfit", "over": "overfit"}[
            args.regime
        ]
        defaults = {
            "well_trained": store.well_trained_regime,
            "underfit": store.underfit_regime,
            "overfit": store.overfit_regime,
        }[kind]()
        if args.epochs is not None:
            defaults = replace(defaults, epoch_count=args.epochs)
        if args.batch_size is not None:
            defaults = replace(defaults, batch_size=args.batch_size)
        regime = replace(defaults, learning_rate=args.lr)
    if args.epochs is not None and args.regime == "polluted":
        regime = replace(regime, epoch_count=args.epochs)
    input_shape = data.inputs.shape[1:]
    classes = int(data.labels.max()) + 1
    arch = ARCHES[args.arch](input_shape, classes)
    model = store.train_model(data, arch, regime, seed=args.seed)
    out = Path(args.out)
    store.save_model(model, out)
    _write_manifest("train", args, out, started)
    print(
        f"trained {args.arch} ({regime.kind}): "
        f"train acc {model.metadata['train_accuracy']:.4f}, "
        f"test acc {model.metadata['test_accuracy']:.4f} -> {out}"
    )
    return 0


def _pick_seeds(model, data, n_seeds, rng):
    """Correctly classified test-split examples, deterministic given the rng."""
    xs, ys = data.test_inputs, data.test_labels
    preds = engine.predict_batch(model, xs)
    ok = np.flatnonzero(preds == ys)
    if len(ok) < n_seeds:
        raise store.StoreError(
            f"only {len(ok)} correctly classified seeds available, need {n_seeds}"
        )
    picked = rng.choice(ok, size=n_seeds, replace=False)
    return xs[picked], ys[picked]


def cmd_fuzz(args) -> int:
    started = time.time()
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    model = store.load_model(Path(args.model))
    data = _load_data(args.data, args.format)
    if args.clamp is None:
        args.clamp = args.linf  # resolved value must land in the manifest
    cfg = fuzzer.FuzzConfig(
        population_size=args.population,
        max_iterations=args.iterations,
        epsilon=args.epsilon,
        linf_budget=args.linf,
        velocity_clamp=args.clamp,
        lam=args.lam,
        fitness_kind={"nc": "neuron_coverage"}.get(args.fitness, args.fitness),
        seed=args.seed,
        shapley_samples=args.shapley_samples,
        scope_limit=args.scope_limit,
    )
    rng = np.random.default_rng(args.seed)
    seed_xs, seed_ys = _pick_seeds(model, data, args.seeds, rng)
    profile = None
    if cfg.fitness_kind == "snac":
        corpus = data.train_inputs[: args.profile_corpus]
        profile = metrics.coverage_profile(model, corpus)
    suite = fuzzer.generate_suite(
        model, seed_xs, seed_ys, cfg, collect_intermediates=args.intermediates,
        profile=profile,
    )
    report = metrics.suite_report(model, suite, seed_xs)
    out = Path(args.out)
    _save_suite(suite, report, out)
    _write_manifest("fuzz", args, out, started)
    print(
        f"suite: {len(suite)} cases, {report.test_error_count} errors, "
        f"{len(report.error_categories)} categories -> {out}"
    )
    return 0 if len(suite.cases) >= 1 else DATA_ERROR


def _save_suite(suite: fuzzer.SuiteResult, report, out: Path) -> None:
    rows = []
    for case in suite.cases:
        rows.append(
            {
                "seed_index": case.seed_index,
                "true_label": case.true_label,
                "predicted_on_seed": case.predicted_label_on_seed,
                "predicted_on_generated": case.predicted_label_on_generated,
                "final_fitness": case.final_fitness,
                "iterations_used": case.iterations_used,
                "fitness_kind": case.fitness_kind,
                "intermediate": case.intermediate,
                "fitness_history": case.fitness_history,
                "generated_input": [
                    int(v)
                    for v in np.clip(
                        np.rint(case.generated_input.reshape(-1) * 255), 0, 255
                    )
                ],
            }
        )
    doc = {
        "cases": rows,
        "failures": suite.failures,
        "summary": json.loads(report.to_json()),
    }
    _atomic_write(out, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def retrain_model(
    model: engine.NetworkModel,
    benign_xs: np.ndarray,
    benign_ys: np.ndarray,
    generated_xs: np.ndarray,
    generated_true_ys: np.ndarray,
    epochs: int = 20,
    batch_size: int = 32,
    learning_rate: float = 0.05,
    seed: int = 0,
) -> engine.NetworkModel:
    """Continue training on benign examples mixed with generated tests
    relabeled to their seeds' true labels."""
    xs = np.concatenate([benign_xs, generated_xs]) if len(generated_xs) else benign_xs
    ys = (
        np.concatenate([benign_ys, generated_true_ys])
        if len(generated_xs)
        else benign_ys
    )
    rng = np.random.default_rng(seed)
    out = model.copy()
    for _ in range(epochs):
        order = rng.permutation(len(xs))
        for lo in range(0, len(xs), batch_size):
            sel = order[lo : lo + batch_size]
            out = engine.sgd_step(out, xs[sel], ys[sel], learning_rate)
    return out


def cmd_retrain(args) -> int:
    started = time.time()
    model = store.load_model(Path(args.model))
    data = _load_data(args.data, args.format)
    suite_doc = json.loads(Path(args.suite).read_text())
    gen_xs, gen_ys = _suite_examples(suite_doc, model.input_shape)
    rng = np.random.default_rng(args.seed)
    benign_xs, benign_ys = _pick_seeds(model, data, args.benign, rng)
    retrained = retrain_model(
        model,
        benign_xs,
        benign_ys,
        gen_xs[: args.generated],
        gen_ys[: args.generated],
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
    )
    eval_xs, eval_ys = _pick_seeds(model, data, args.eval_seeds, rng)
    report = {
        "degenerate_suite": bool(len(gen_xs) == 0),
        "benign_accuracy_before": metrics.accuracy(model, (data.test_inputs, data.test_labels)),
        "benign_accuracy_after": metrics.accuracy(
            retrained, (data.test_inputs, data.test_labels)
        ),
    }
    adv_before = metrics.attack_pgd(model, eval_xs, eval_ys, args.pgd_epsilon)
    adv_after = metrics.attack_pgd(retrained, eval_xs, eval_ys, args.pgd_epsilon)
    report["asr_before"] = metrics.asr(model, adv_before, eval_ys)
    report["asr_after"] = metrics.asr(retrained, adv_after, eval_ys)
    report["delta_asr"] = report["asr_before"] - report["asr_after"]
    if args.clever_probes:
        before = []
        after = []
        for i in range(min(args.clever_probes, len(eval_xs))):
            before.append(
                metrics.clever_l2(
                    model, eval_xs[i], seed=args.seed + i,
                    batch_count=args.clever_nb, samples_per_batch=args.clever_ns,
                ).score
            )
            if int(engine.predict_batch(retrained, eval_xs[i][None])[0]) == eval_ys[i]:
                after.append(
                    metrics.clever_l2(
                        retrained, eval_xs[i], seed=args.seed + i,
                        batch_count=args.clever_nb, samples_per_batch=args.clever_ns,
                    ).score
                )
        report["clever_before_mean"] = float(np.mean(before)) if before else None
        report["clever_after_mean"] = float(np.mean(after)) if after else None
    drop = report["benign_accuracy_before"] - report["benign_accuracy_after"]
    report["accuracy_guard_tripped"] = bool(drop > args.accuracy_guard)
    out = Path(args.out)
    store.save_model(retrained, out)
    _atomic_write(
        out.with_suffix(".report.json"),
        json.dumps(report, indent=2, sort_keys=True) + "\n",
    )
    _write_manifest("retrain", args, out, started)
    print(
        f"retrained -> {out}: ASR {report['asr_before']:.3f} -> "
        f"{report['asr_after']:.3f}, benign acc "
        f"{report['benign_accuracy_before']:.3f} -> {report['benign_accuracy_after']:.3f}"
    )
    return 0


def _suite_examples(suite_doc: dict, input_shape) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for row in suite_doc.get("cases", []):
        pixels = np.array(row["generated_input"], dtype=np.float32) / 255.0
        xs.append(pixels.reshape(input_shape))
        ys.append(int(row["true_label"]))
    if not xs:
        return np.zeros((0, *input_shape), np.float32), np.zeros(0, np.int64)
    return np.stack(xs), np.array(ys, dtype=np.int64)


def cmd_probe(args) -> int:
    started = time.time()
    model = store.load_model(Path(args.model))
    data = _load_data(args.data, args.format)
    rng = np.random.default_rng(args.seed)
    seed_xs, seed_ys = _pick_seeds(model, data, 1, rng)
    ctx = attribution.UtilityContext(
        model, seed_xs[0], int(seed_ys[0]), noise_draws=args.noise_draws,
        seed=args.seed,
    )
    if args.scope_layer is not None:
        scope = [
            nid for nid in engine.neuron_ids(model) if nid.layer_index == args.scope_layer
        ]
        if not scope:
            raise UsageError(f"layer {args.scope_layer} has no countable neurons")
    else:
        scope = fuzzer.stratified_scope(model, args.scope_limit, args.seed)
    if args.exact:
        report = attribution.shapley_exact(ctx, scope)
    else:
        report = attribution.shapley_sampled(ctx, scope, args.samples, args.seed)
    out = Path(args.out)
    _atomic_write(out, report.to_json() + "\n")
    _write_manifest("probe", args, out, started)
    excited = attribution.select_excitable(report, args.lam)
    print(
        f"probe: {len(scope)} neurons, estimator {report.estimator}, "
        f"{len(excited.neurons)} excitable at lambda={args.lam} -> {out}"
    )
    return 0


def cmd_clever(args) -> int:
    started = time.time()
    model = store.load_model(Path(args.model))
    data = _load_data(args.data, args.format)
    rng = np.random.default_rng(args.seed)
    seed_xs, seed_ys = _pick_seeds(model, data, args.probes, rng)
    results = []
    for i in range(args.probes):
        est = metrics.clever_l2(
            model,
            seed_xs[i],
            seed=args.seed + i,
            batch_count=args.nb,
            samples_per_batch=args.ns,
            radius=args.radius,
            true_label=int(seed_ys[i]),
        )
        results.append(json.loads(est.to_json()))
    out = Path(args.out)
    doc = {
        "scores": [r["score"] for r in results],
        "mean_score": float(np.mean([r["score"] for r in results])),
        "estimates": results,
    }
    _atomic_write(out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_manifest("clever", args, out, started)
    print(f"clever: mean score {doc['mean_score']:.4f} over {args.probes} probes -> {out}")
    return 0


def cmd_report(args) -> int:
    started = time.time()
    merged: dict = {}
    for path in args.merge:
        doc = json.loads(Path(path).read_text())
        key = Path(path).stem
        merged[key] = doc
    out = Path(args.out)
    _atomic_write(out, json.dumps(merged, indent=2, sort_keys=True) + "\n")
    rows = ["source,test_errors,error_categories,average_categories"]
    for key in sorted(merged):
        summary = merged[key].get("summary", merged[key])
        if "test_error_count" in summary:
            rows.append(
                f"{key},{summary['test_error_count']},"
                f"{len(summary['error_categories'])},"
                f"{summary['average_categories_per_seed']}"
            )
    _atomic_write(out.with_suffix(".csv"), "\n".join(rows) + "\n")
    _write_manifest("report", args, out, started)
    print(f"merged {len(merged)} reports -> {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="excitest",
        description="White-box NN testing via excitable neurons and swarm search",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--data", default="digits", help="dataset path or 'digits'")
        p.add_argument(
            "--format",
            default="csv_digits",
            choices=["csv_digits", "idx_images", "synthetic_blobs"],
        )
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model under a regime")
    add_common(p)
    p.add_argument("--arch", default="mlp64", choices=sorted(ARCHES))
    p.add_argument(
        "--regime", default="well", choices=["well", "under", "over", "polluted"]
    )
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--patch-min", type=int, default=1)
    p.add_argument("--patch-max", type=int, default=6)
    p.add_argument("--target-class", type=int, default=1)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=0.1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuzz", help="generate a testing suite")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument(
        "--fitness",
        default="excitable",
        choices=["excitable", "excitable_cached", "nc", "neuron_coverage", "snac"],
    )
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--linf", type=float, default=0.1)
    p.add_argument(
        "--clamp", type=float, default=None,
        help="velocity clamp; defaults to the linf budget",
    )
    p.add_argument("--population", type=int, default=100)
    p.add_argument("--shapley-samples", type=int, default=30)
    p.add_argument("--scope-limit", type=int, default=32)
    p.add_argument("--intermediates", action="store_true")
    p.add_argument("--profile-corpus", type=int, default=1000)
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("retrain", help="retrain with generated tests and report deltas")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--suite", required=True)
    p.add_argument("--benign", type=int, default=500)
    p.add_argument("--generated", type=int, default=500)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--eval-seeds", type=int, default=100)
    p.add_argument("--pgd-epsilon", type=float, default=0.3)
    p.add_argument("--accuracy-guard", type=float, default=0.05)
    p.add_argument("--clever-probes", type=int, default=0)
    p.add_argument("--clever-nb", type=int, default=50)
    p.add_argument("--clever-ns", type=int, default=128)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("probe", help="emit a Shapley report for one seed")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--exact", action="store_true")
    p.add_argument("--scope-layer", type=int, default=None)
    p.add_argument("--scope-limit", type=int, default=16)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--noise-draws", type=int, default=5)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("clever", help="estimate robustness scores")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--probes", type=int, default=10)
    p.add_argument("--nb", type=int, default=500)
    p.add_argument("--ns", type=int, default=1024)
    p.add_argument("--radius", type=float, default=0.5)
    p.set_defaults(func=cmd_clever)

    p = sub.add_parser("report", help="merge suite/metric files into one table")
    p.add_argument("--merge", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (store.StoreError, metrics.MetricsError, fuzzer.FuzzError,
            attribution.AttributionError, engine.EngineError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except AssertionError as exc:
        print(f"internal invariant violation: {exc}", file=sys.stderr)
        return INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
