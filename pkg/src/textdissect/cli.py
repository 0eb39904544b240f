"""Command-line entry point.

Exit codes: 0 success, 1 configuration or input error, 2 run aborted,
3 captioner unavailable (slice), 4 replay divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as config_mod
from .agents import AgentTemplates
from .context import StopWordPolicy, extract_lexical_units
from .errors import ConfigError, DissectError, ReplayDivergence, SchemaError
from .evalkit import (
    DESCRIPTORS_SCHEMA,
    DescriptorSet,
    PrototypeSet,
    aggregate_slices,
    dump_descriptor_sets,
    evaluate,
    load_class_map,
    load_descriptor_sets,
    load_embeddings,
    pseudo_label,
    write_eval,
    write_groups,
)
from .optimizer import (
    EARLY_STOP,
    OPERATOR_ABORT,
    RESULT_SCHEMA,
    TraceWriter,
    read_result,
    read_trace,
    replay_file,
    run,
    trace_header,
    write_result,
)
from .plotting import plot_slice_report, plot_trajectory
from .providers import embed
from .signal import SignalTables

logger = logging.getLogger("textdissect")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_NO_CAPTIONER, EXIT_DIVERGED = 0, 1, 2, 3, 4

ABLATIONS = {"global-context": "run.global_context_enabled", "intensity": "run.intensity_enabled"}


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--mode", choices=["http", "simulation"])
    p.add_argument("--target-class", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--tau-best", type=float)
    p.add_argument("--tau-high", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", help="comma-separated target classes, run as parallel workers")
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), default=[])
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted configuration override, e.g. run.k=5")
    p.add_argument("--out", default="runs/latest", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textdissect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dissect", help="recover descriptors for one or more target classes")
    _run_flags(p)
    p = sub.add_parser("simulate", help="dissect against the offline lexical world")
    _run_flags(p)
    p = sub.add_parser("slice", help="slice discovery: captions on high-confidence samples")
    _run_flags(p)
    p.add_argument("--domain", help="domain prior used in the initial prompt")
    p.add_argument("--features", help="image-feature embedding document for pseudo-labeling")

    p = sub.add_parser("eval", help="descriptor-label/-data/-image similarity table")
    p.add_argument("--config")
    p.add_argument("--mode", choices=["http", "simulation"])
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--descriptors", required=True, help="descriptor-set document or result.json")
    p.add_argument("--labels", help="JSON object class_id -> label")
    p.add_argument("--keywords", help="JSON object class_id -> keyword list")
    p.add_argument("--image-embeddings", help="embedding document of image features per class")
    p.add_argument("--out", default="runs/eval")

    p = sub.add_parser("replay", help="audit a trace by recomputing its derived fields")
    p.add_argument("trace")
    p.add_argument("--result", help="also compare against this result.json")
    return parser


def _overrides(args) -> list:
    out = list(args.overrides)
    if getattr(args, "command", None) == "simulate":
        out.append("providers.mode=simulation")
    elif getattr(args, "mode", None):
        out.append(f"providers.mode={args.mode}")
    for flag, key in [("target_class", "run.target_class"), ("max_steps", "run.max_steps"),
                      ("tau_best", "run.tau_best"), ("tau_high", "run.tau_high"),
                      ("epsilon", "run.epsilon"), ("seed", "run.seed")]:
        value = getattr(args, flag, None)
        if value is not None:
            out.append((key.split("."), value))
    for name in getattr(args, "ablate", []):
        out.append((ABLATIONS[name].split("."), False))
    return out


def _policy(cfg) -> StopWordPolicy:
    path = cfg["paths"]["stop_words"]
    return StopWordPolicy.from_file(path) if path else StopWordPolicy.default()


def execute_run(cfg: dict, out_dir, with_captioner: bool = False) -> dict:
    """One run with all outputs written to ``out_dir``; returns a summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rc = config_mod.run_config(cfg)
    providers = config_mod.build_providers(cfg, with_captioner)
    tables = SignalTables.load(cfg["paths"]["signal_tables"] or None)
    templates = AgentTemplates.load(cfg["paths"]["templates"] or None)
    policy = _policy(cfg)
    (out_dir / "config-snapshot.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", "utf-8")

    simulated = cfg["providers"]["mode"] == "simulation"
    clock = (lambda: 0.0) if simulated and cfg["simulation"]["deterministic_clock"] else time.perf_counter
    trace_path = out_dir / "trace.jsonl"
    with TraceWriter(trace_path, trace_header(rc, tables, policy)) as tw:
        result = run(rc, providers, templates, tables, policy, trace=tw, clock=clock)
    write_result(result, out_dir / "result.json")

    _, records, _ = read_trace(trace_path)
    early = records[-1].step if result.stop_reason == EARLY_STOP and records else None
    plot_trajectory(records, out_dir / "trajectory.svg", rc.tau_best, early,
                    title=f"target class {rc.target_class}: {result.stop_reason}")
    return {
        "target_class": rc.target_class,
        "out_dir": str(out_dir),
        "stop_reason": result.stop_reason,
        "steps_used": result.steps_used,
        "error": result.error,
        "descriptors": [u.token for u in result.descriptors],
        "captioner": providers.captioner is not None,
    }


def _targets(args, cfg) -> list:
    if getattr(args, "classes", None):
        try:
            return [int(c) for c in args.classes.split(",") if c.strip()]
        except ValueError:
            raise ConfigError(f"--classes expects integers, got {args.classes!r}") from None
    return [int(cfg["run"]["target_class"])]


def _with_target(cfg: dict, j: int) -> dict:
    out = json.loads(json.dumps(cfg))
    out["run"]["target_class"] = j
    return out


def _run_many(cfg, targets, out_root: Path, with_captioner=False) -> list:
    if len(targets) == 1:
        return [execute_run(cfg, out_root, with_captioner)]
    jobs = [(_with_target(cfg, j), out_root / f"class_{j}", with_captioner) for j in targets]
    with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
        futures = [pool.submit(execute_run, *job) for job in jobs]
        return [f.result() for f in futures]


def _report(summaries) -> None:
    for s in summaries:
        line = f"class {s['target_class']}: {s['stop_reason']} after {s['steps_used']} steps -> {s['out_dir']}"
        print(line)
        print("  descriptors: " + (", ".join(s["descriptors"]) or "(none)"))
        if s["error"]:
            print(f"  error: {s['error']}")


def cmd_dissect(args) -> int:
    cfg = config_mod.resolve(args.config, _overrides(args))
    out_root = Path(args.out)
    targets = _targets(args, cfg)
    summaries = _run_many(cfg, targets, out_root)
    if len(summaries) > 1:
        sets = [DescriptorSet(s["target_class"], s["descriptors"]) for s in summaries]
        dump_descriptor_sets(sets, out_root / "descriptors.json")
    _report(summaries)
    return EXIT_ABORT if any(s["stop_reason"] == OPERATOR_ABORT for s in summaries) else EXIT_OK


def cmd_slice(args) -> int:
    first = config_mod.resolve(args.config, _overrides(args), preset=config_mod.SLICE_PRESET)
    domain = args.domain or first["slice"]["domain"]
    preset = json.loads(json.dumps(config_mod.SLICE_PRESET))
    preset["run"]["init_prompt"] = f"a picture of a {domain}"
    cfg = config_mod.resolve(args.config, _overrides(args), preset=preset)
    out_root = Path(args.out)
    targets = _targets(args, cfg)
    summaries = _run_many(cfg, targets, out_root, with_captioner=True)
    _report(summaries)

    policy = _policy(cfg)
    exclude = extract_lexical_units(cfg["run"]["init_prompt"], policy) if cfg["slice"]["exclude_prior"] else []
    reports, unavailable = {}, False
    for s in summaries:
        _, records, _ = read_trace(Path(s["out_dir"]) / "trace.jsonl")
        captions = [r.captions for r in records if r.captions is not None]
        failures = [r.caption_error for r in records if r.caption_error]
        if not s["captioner"] or (failures and not captions):
            unavailable = True
            print(f"class {s['target_class']}: captioner unavailable, slice report omitted", file=sys.stderr)
            continue
        report = aggregate_slices(captions, s["target_class"], exclude)
        if not captions:
            logger.warning("class %d: no sample reached the confidence threshold; report is empty",
                           s["target_class"])
        Path(s["out_dir"], "slice_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", "utf-8")
        plot_slice_report(report, Path(s["out_dir"]) / "slices.svg")
        reports[s["target_class"]] = report
        print(f"class {s['target_class']}: top attribute {report.top!r} "
              f"over {report.total_samples} captioned samples")

    if args.features:
        _write_groups(cfg, reports, Path(args.features), out_root)
    if any(s["stop_reason"] == OPERATOR_ABORT for s in summaries):
        return EXIT_ABORT
    return EXIT_NO_CAPTIONER if unavailable else EXIT_OK


def _write_groups(cfg, reports, features_path: Path, out_root: Path) -> None:
    usable = {cid: r for cid, r in reports.items() if r.top is not None}
    if len(usable) < 2:
        logger.warning("pseudo-labeling needs slice reports for at least two classes; groups.csv not written")
        return
    emb = config_mod.build_embedder(cfg)
    protos = PrototypeSet.from_vectors({cid: embed(r.top, emb) for cid, r in sorted(usable.items())})
    feats = load_embeddings(features_path)
    ids = json.loads(features_path.read_text("utf-8")).get("ids", {})
    rows = []
    for cid, matrix in sorted(feats.items()):
        if cid not in protos.labels:
            continue
        names = ids.get(str(cid)) or [f"{cid}-{i}" for i in range(len(matrix))]
        for name, status in zip(names, pseudo_label(matrix, protos, cid)):
            rows.append((name, f"{cid}_{status}"))
    write_groups(rows, out_root / "groups.csv")
    print(f"groups.csv: {len(rows)} images, {sum(r[1].endswith('conflict') for r in rows)} in conflict slices")


def _descriptor_sets(path: Path) -> list:
    doc = json.loads(path.read_text("utf-8"))
    if doc.get("schema") == RESULT_SCHEMA:
        res = read_result(path)
        return [DescriptorSet(res.target_class, [u.token for u in res.descriptors])]
    if doc.get("schema") == DESCRIPTORS_SCHEMA:
        return load_descriptor_sets(path)
    raise SchemaError(f"{path}: unsupported schema {doc.get('schema')!r}")


def cmd_eval(args) -> int:
    cfg = config_mod.resolve(args.config, _overrides(args))
    sets = _descriptor_sets(Path(args.descriptors))
    labels = load_class_map(args.labels) if args.labels else None
    keywords = load_class_map(args.keywords) if args.keywords else None
    images = load_embeddings(args.image_embeddings) if args.image_embeddings else None
    rows = evaluate(sets, config_mod.build_embedder(cfg), labels, keywords, images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, _ = write_eval(rows, out)
    for r in rows:
        cells = " ".join(f"{m}={'n/a' if r[m] is None else format(r[m], '.4f')}" for m in ("dl", "dd", "di"))
        print(f"class {r['class_id']}: {cells}")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_replay(args) -> int:
    result = replay_file(args.trace)
    if args.result:
        recorded = read_result(args.result)
        if [(u.token, u.score) for u in recorded.descriptors] != [(u.token, u.score) for u in result.descriptors]:
            raise ReplayDivergence(result.steps_used - 1, "descriptors",
                                   [u.token for u in recorded.descriptors], [u.token for u in result.descriptors])
        if recorded.stop_reason != result.stop_reason:
            raise ReplayDivergence(result.steps_used - 1, "stop_reason", recorded.stop_reason, result.stop_reason)
    print(f"replay ok: {result.steps_used} steps, {result.stop_reason}, "
          f"descriptors: {', '.join(u.token for u in result.descriptors) or '(none)'}")
    return EXIT_OK


COMMANDS = {"dissect": cmd_dissect, "simulate": cmd_dissect, "slice": cmd_slice,
            "eval": cmd_eval, "replay": cmd_replay}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ReplayDivergence as exc:
        print(f"replay divergence at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, KeyError, DissectError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
