"""Command-line entry point exposing the pipeline stages as subcommands.

Stages communicate through files in a work directory: `simulate` writes
telemetry, `preprocess` turns it into windows, `train` fits a model,
`evaluate` scores it, `ablate` runs the backbone comparison, and `report`
emits the separability tables. Every command is deterministic given its
flags and overwrites outputs atomically, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

from . import train_eval
from .preprocess import preprocess_stream, windows_from_bytes, write_preprocess_outputs
from .prng import prng_new
from .serialize import (
    atomic_write_bytes,
    atomic_write_text,
    deserialize_stream,
    faults_from_json,
    faults_to_json,
    graph_from_json,
    graph_to_json,
    load_checkpoint,
    save_checkpoint,
    serialize_stream,
    write_csv,
)
from .simulator import ScenarioSpec, generate_topology, schedule_faults, scenario_preset, simulate
from .train_eval import DatasetBundle, SeparabilityMode, ablate, prepare_dataset, train
from .types import Backbone, RunConfig, Task

PRESETS = ("local", "propagated")


def _default_workdir(args: argparse.Namespace) -> Path:
    scenario = getattr(args, "scenario", None) or "run"
    name = Path(scenario).stem if scenario not in PRESETS else scenario
    return Path("runs") / f"{name}-s{getattr(args, 'seed', 0)}"


def _load_scenario(value: str) -> ScenarioSpec:
    if value in PRESETS:
        return scenario_preset(value)
    path = Path(value)
    if not path.is_file():
        raise FileNotFoundError(f"scenario '{value}' is neither a preset {PRESETS} nor a file")
    return ScenarioSpec.from_dict(json.loads(path.read_text("utf-8")))


def _run_config(args: argparse.Namespace, scenario: ScenarioSpec | None = None) -> RunConfig:
    window = args.window
    stride = args.stride
    if window is None:
        window = scenario.window_len_s if scenario else 60.0
    if stride is None:
        stride = scenario.stride_s if scenario else 60.0
    return RunConfig(
        seed=args.seed,
        task=Task(args.task.upper()),
        backbone=Backbone(args.backbone.upper()),
        d=args.d,
        hidden=args.hidden,
        dropout_rate=args.dropout,
        window_len=window,
        stride=stride,
    )


def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = _load_scenario(args.scenario)
    out = Path(args.out) if args.out else _default_workdir(args)
    root = prng_new(args.seed)
    graph = generate_topology(scenario.n_nodes, scenario.edge_density, root.child("simulate"))
    faults = schedule_faults(scenario, graph, root.child("simulate"))
    stream = simulate(graph, faults, scenario, root.child("simulate"))
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "telemetry.jsonl", serialize_stream(stream))
    atomic_write_text(out / "graph.json", graph_to_json(graph))
    atomic_write_text(out / "faults.json", faults_to_json(faults))
    atomic_write_text(
        out / "scenario.json",
        json.dumps({"scenario": scenario.to_dict(), "seed": args.seed}, indent=2) + "\n",
    )
    print(f"simulated {len(stream.nodes)} nodes, {len(faults)} faults -> {out}")
    return 0


def cmd_preprocess(args: argparse.Namespace) -> int:
    indir = Path(args.indir)
    out = Path(args.out) if args.out else indir
    stream = deserialize_stream((indir / "telemetry.jsonl").read_bytes())
    faults = faults_from_json((indir / "faults.json").read_text("utf-8"))
    meta_path = indir / "scenario.json"
    window_s, stride_s, seed = args.window, args.stride, 0
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text("utf-8"))
        seed = int(meta.get("seed", 0))
        spec = ScenarioSpec.from_dict(meta["scenario"])
        if window_s is None:
            window_s = spec.window_len_s
        if stride_s is None:
            stride_s = spec.stride_s
    window_s = 60.0 if window_s is None else window_s
    stride_s = 60.0 if stride_s is None else stride_s
    result = preprocess_stream(
        stream, faults,
        int(round(window_s * 1000)), int(round(stride_s * 1000)),
        prng_new(seed).child("preprocess"),
    )
    write_preprocess_outputs(result, out)
    split = result.split
    print(
        f"windows: {len(split.train)} train / {len(split.valid)} valid / "
        f"{len(split.test)} test -> {out}"
    )
    return 0


def _load_bundle(workdir: Path) -> DatasetBundle:
    raw = (workdir / "windows.jsonl").read_bytes()
    nodes, split, header = windows_from_bytes(raw)
    graph = graph_from_json((workdir / "graph.json").read_text("utf-8"))
    return DatasetBundle(
        nodes=nodes,
        split=split,
        graph=graph,
        vocab_size=int(header["vocab_size"]),
        digest=hashlib.sha256(raw).hexdigest(),
    )


def cmd_train(args: argparse.Namespace) -> int:
    workdir = Path(args.workdir) if args.workdir else _default_workdir(args)
    bundle = _load_bundle(workdir)
    config = _run_config(args)
    result = train(bundle, config)
    save_checkpoint(result.params, workdir / "checkpoint.json")
    atomic_write_text(
        workdir / "run_config.json", json.dumps(config.to_dict(), indent=2) + "\n"
    )
    write_csv(workdir / "history.csv", ["epoch", "split", "loss", "objective"], result.history)
    print(
        f"trained {config.backbone.value} on {config.task.value}: "
        f"best validation objective {result.best_objective:.6f} at epoch "
        f"{result.best_epoch} ({result.epochs_run} epochs run) -> {workdir}"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    workdir = Path(args.workdir) if args.workdir else _default_workdir(args)
    bundle = _load_bundle(workdir)
    config = RunConfig.from_dict(
        json.loads((workdir / "run_config.json").read_text("utf-8"))
    )
    params = load_checkpoint(workdir / "checkpoint.json")
    report = train_eval.evaluate(
        params, bundle.split.test, config.task, bundle.vocab_size,
        backbone=config.backbone, graph=bundle.graph,
        fingerprint=train_eval.config_fingerprint(config, bundle.digest),
    )
    payload = {
        "task": report.task.value,
        "n_runs": report.n_runs,
        "metrics": {k: round(v, 6) for k, (v, _) in sorted(report.mean_and_std.items())},
        "fingerprint": report.fingerprint,
    }
    atomic_write_text(workdir / "metrics.json", json.dumps(payload, indent=2) + "\n")
    for name, value in sorted(payload["metrics"].items()):
        print(f"{name}: {value:.6f}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    scenario = _load_scenario(args.scenario)
    workdir = Path(args.workdir) if args.workdir else _default_workdir(args)
    bundle, _, _ = prepare_dataset(
        scenario, args.seed, window_s=args.window, stride_s=args.stride
    )
    base = _run_config(args, scenario)
    result = ablate(bundle, base, seeds)
    header, rows = train_eval.results_csv_rows(result)
    write_csv(workdir / "results.csv", header, rows)
    atomic_write_text(workdir / "summary.md", train_eval.render_summary(result))
    print(f"ablation over seeds {seeds} -> {workdir / 'results.csv'}")
    for backbone in (Backbone.DIAGMLP, Backbone.GCN):
        for name in sorted({m for r in result.reports.values() if r for m in r.per_run}):
            try:
                print(f"{backbone.value} {name}: {result.mean(backbone, name):.6f}")
            except Exception:
                print(f"{backbone.value} {name}: failed")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    scenario = _load_scenario(args.scenario)
    workdir = Path(args.workdir) if args.workdir else _default_workdir(args)
    bundle, _, _ = prepare_dataset(
        scenario, args.seed, window_s=args.window, stride_s=args.stride
    )
    base = _run_config(args, scenario)
    variants = []
    checkpoints = {}
    for backbone in (Backbone.DIAGMLP, Backbone.GCN):
        cfg = dataclasses.replace(base, backbone=backbone)
        checkpoints[backbone] = train(bundle, cfg).params
    test = bundle.split.test
    variants.append(
        ("raw", *train_eval.separability_report(
            test, SeparabilityMode.RAW_CONCAT, checkpoints[Backbone.DIAGMLP],
            bundle.vocab_size, backbone=Backbone.DIAGMLP, graph=bundle.graph,
        ))
    )
    variants.append(
        ("mlp_trunk", *train_eval.separability_report(
            test, SeparabilityMode.MODEL_EMBED, checkpoints[Backbone.DIAGMLP],
            bundle.vocab_size, backbone=Backbone.DIAGMLP, graph=bundle.graph,
        ))
    )
    variants.append(
        ("gcn_trunk", *train_eval.separability_report(
            test, SeparabilityMode.MODEL_EMBED, checkpoints[Backbone.GCN],
            bundle.vocab_size, backbone=Backbone.GCN, graph=bundle.graph,
        ))
    )
    point_rows = []
    score_rows = []
    for name, points, labels, score in variants:
        score_rows.append([name, round(float(score), 6)])
        for (x, y), label in zip(points, labels):
            point_rows.append([name, round(float(x), 6), round(float(y), 6), int(label)])
    write_csv(workdir / "separability.csv", ["variant", "x", "y", "label"], point_rows)
    write_csv(workdir / "separability_scores.csv", ["variant", "silhouette"], score_rows)
    for name, _, _, score in variants:
        print(f"{name} silhouette: {score:.6f}")
    print(f"-> {workdir / 'separability.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microdiag",
        description="Synthetic microservice fault diagnosis: simulate, "
        "preprocess, train, evaluate, ablate, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common_model_flags(p):
        p.add_argument("--backbone", choices=["diagmlp", "gcn"], default="diagmlp",
                       help="model backbone (default diagmlp)")
        p.add_argument("--task", choices=["detect", "localize", "classify"],
                       default="localize", help="diagnosis task (default localize)")
        p.add_argument("--d", type=int, default=16, help="embedding width (default 16)")
        p.add_argument("--hidden", type=int, default=64, help="fusion width (default 64)")
        p.add_argument("--dropout", type=float, default=0.1,
                       help="dropout rate (default 0.1)")

    def window_flags(p, default_none=False):
        p.add_argument("--window", type=float, default=None if default_none else 30.0,
                       help="window length in seconds")
        p.add_argument("--stride", type=float, default=None if default_none else 30.0,
                       help="window stride in seconds")

    p = sub.add_parser("simulate", help="generate telemetry for a scenario")
    p.add_argument("--scenario", default="local",
                   help="preset name (local, propagated) or scenario JSON file")
    p.add_argument("--seed", type=int, default=0, help="simulation seed (default 0)")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", help="turn staged telemetry into windows")
    p.add_argument("--in", dest="indir", required=True, help="directory from simulate")
    window_flags(p, default_none=True)
    p.add_argument("--out", default=None, help="output directory (default: --in)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model on staged windows")
    p.add_argument("--workdir", default=None, help="directory with windows.jsonl + graph.json")
    p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    common_model_flags(p)
    window_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained checkpoint on the test split")
    p.add_argument("--workdir", default=None, help="directory with checkpoint.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the backbone comparison over seeds")
    p.add_argument("--scenario", default="local",
                   help="preset name or scenario JSON file (default local)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    p.add_argument("--seeds", default="1,2,3,4,5",
                   help="comma-separated run seeds (default 1,2,3,4,5)")
    p.add_argument("--workdir", default=None, help="output directory")
    common_model_flags(p)
    window_flags(p, default_none=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="emit 2D separability tables for raw and trunk features")
    p.add_argument("--scenario", default="local",
                   help="preset name or scenario JSON file (default local)")
    p.add_argument("--seed", type=int, default=1, help="run + dataset seed (default 1)")
    p.add_argument("--workdir", default=None, help="output directory")
    common_model_flags(p)
    window_flags(p, default_none=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
