"""Command-line entry point: ``popsynth {train,synthesize,evaluate,gen-world}``.

Every command writes its outputs plus one ``manifest.json`` into ``--out-dir``.
Exit codes: 0 ok, 2 usage, 3 data, 4 numeric (training divergence), 5 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, ctgan
from .core_data import (
    DataError,
    MarginalTable,
    Population,
    Provenance,
    aggregate_marginals,
    emit_marginals,
    emit_population,
    generate_ground_truth,
    load_ground_truth_spec,
    load_schema,
    parse_marginals,
    parse_population,
    save_schema,
)
from .metrics import evaluate, r_squared
from .pipeline import (
    WORK_RECODE,
    ExperimentConfig,
    SharedInputs,
    Strategy,
    evaluate_against_targets,
    recode_population,
    recode_table,
    run_experiment,
    target_schema,
    write_outputs,
)

logger = logging.getLogger("popsynth")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, seed, outputs: Sequence[Path],
                   started: str) -> Path:
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in inputs.items() if p is not None},
        "seed": seed,
        "version": __version__,
        "started": started,
        "finished": _now(),
        "outputs": {str(Path(p).relative_to(out_dir)): sha256_file(p) for p in sorted(outputs)},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _config_of(args: argparse.Namespace) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}


def _require(args, *names):
    for n in names:
        if getattr(args, n.replace("-", "_")) is None:
            raise UsageError(f"{args.command}: --{n} is required")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_inputs(path, what):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    _require(args, "schema", "micro-sample", "seed")
    started = _now()
    schema = load_schema(_load_inputs(args.schema, "schema"))
    micro = parse_population(_load_inputs(args.micro_sample, "micro-sample"), schema)
    overrides = {k: getattr(args, k) for k in ("epochs", "batch_size", "hidden", "z_dim", "pac") if getattr(args, k) is not None}
    config = ctgan.TrainConfig(seed=args.seed, **overrides)
    out = _out_dir(args)
    model = ctgan.train(micro, config, progress=lambda e, g, d: logger.info("epoch %d g_loss %.4f d_loss %.4f", e + 1, g, d))
    ckpt = out / "model.ckpt"
    model.save(ckpt)
    loss = out / "loss.csv"
    model.write_loss_csv(loss)
    cfg = _config_of(args)
    cfg["train_config"] = dataclasses.asdict(config)
    write_manifest(out, "train", cfg, {"schema": args.schema, "micro_sample": args.micro_sample}, args.seed,
                   [ckpt, loss], started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synthesize

def _load_targets(path, schema, recode) -> list[MarginalTable]:
    """Parse zone targets given in either the raw or the recoded vocabularies."""
    if recode:
        try:
            return parse_marginals(path, target_schema(schema, recode))
        except DataError:
            pass
    tables = parse_marginals(path, schema)
    return [recode_table(t, recode) for t in tables] if recode else tables


def _experiment_config(args) -> ExperimentConfig:
    base = {}
    if args.config is not None:
        with open(_load_inputs(args.config, "config"), encoding="utf-8") as fh:
            base = json.load(fh)
    for key in ("schema", "micro_sample", "targets", "checkpoint"):
        if getattr(args, key) is None and base.get(key) is not None:
            setattr(args, key, base[key])
    if args.seed is None:
        args.seed = base.get("seed")
    if args.seed is None:
        raise UsageError("synthesize: --seed is required")
    flags = {
        "rssz_threshold": args.rssz_threshold,
        "budget_factor": args.budget_factor,
        "pool_multiplier": args.pool_multiplier,
        "max_iterations": args.max_iterations,
        "restarts": args.restarts,
    }
    merged = {**base, **{k: v for k, v in flags.items() if v is not None}, "seed": args.seed}
    if args.strategy:
        merged["strategies"] = args.strategy
    if args.no_recode_work:
        merged["recode_work"] = False
    for key in ("schema", "micro_sample", "targets", "checkpoint"):
        merged[key] = None if getattr(args, key) is None else str(getattr(args, key))
    try:
        return ExperimentConfig.from_dict(merged)
    except TypeError as exc:
        raise UsageError(f"invalid experiment config: {exc}") from None


def _work_recode(schema, enabled: bool) -> dict:
    """WORK merge into two categories, applied only when the schema has the part-time level."""
    return {k: v for k, v in WORK_RECODE.items()
            if enabled and k in schema and "part-time" in schema[k].categories}


def cmd_synthesize(args) -> int:
    started = _now()
    cfg = _experiment_config(args)
    _require(args, "schema", "targets")
    needs_model = {Strategy.STANDALONE, Strategy.HYBRID} & set(cfg.strategies)
    needs_micro = {Strategy.BASELINE, Strategy.HYBRID} & set(cfg.strategies)
    if needs_model and args.checkpoint is None:
        raise UsageError(f"synthesize: --checkpoint is required for {', '.join(sorted(s.value for s in needs_model))}")
    if needs_micro and args.micro_sample is None:
        raise UsageError(f"synthesize: --micro-sample is required for {', '.join(sorted(s.value for s in needs_micro))}")

    schema = load_schema(_load_inputs(args.schema, "schema"))
    recode = _work_recode(schema, cfg.recode_work)
    targets = _load_targets(_load_inputs(args.targets, "targets"), schema, recode)
    micro = parse_population(_load_inputs(args.micro_sample, "micro-sample"), schema) if args.micro_sample else None
    model = None
    if args.checkpoint is not None:
        model = ctgan.TrainedGenerator.load(_load_inputs(args.checkpoint, "checkpoint"), schema=schema)

    result = run_experiment(cfg.jobs(targets), SharedInputs(micro, model, recode=recode), n_jobs=args.jobs)
    out = _out_dir(args)
    written = write_outputs(result, out)
    failed = [o for o in result.outcomes if o.diagnostic]
    for o in failed:
        logger.warning("zone %s (%s): %s", o.zone_id, o.strategy.value, o.diagnostic)
    inputs = {"schema": args.schema, "targets": args.targets, "micro_sample": args.micro_sample,
              "checkpoint": args.checkpoint, "config": args.config}
    config = _config_of(args)
    config["experiment"] = cfg.to_dict()
    write_manifest(out, "synthesize", config, inputs, cfg.seed, written, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

def _zone_labels(path, column) -> list[str] | None:
    import csv

    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, [])
        if column not in header:
            return None
        i = header.index(column)
        return [rec[i] for rec in reader if rec]


def _split_by_zone(pop: Population, zones: list[str] | None) -> dict[str, Population]:
    if zones is None:
        return {"": pop}
    arr = np.asarray(zones)
    return {z: pop.take(np.flatnonzero(arr == z)) for z in sorted(set(zones))}


def scatter_pairs(real_counts: dict[str, MarginalTable], synth_by_zone: dict[str, Population], attr: str):
    """(real, synthetic) category counts per zone for ``attr``."""
    pairs = []
    for z in sorted(real_counts):
        real = real_counts[z].marginalize([attr])
        synth = synth_by_zone.get(z)
        syn = aggregate_marginals(synth, [attr]) if synth is not None else MarginalTable(z, (attr,), {})
        cats = synth.schema[attr].categories if synth is not None else sorted({k[0] for k in real.cells})
        for c in cats:
            pairs.append((real.count((c,)), syn.count((c,))))
    return pairs


def write_scatter_svg(pairs, attr: str, path) -> float | None:
    """Static scatter of real vs synthetic counts with identity line and R^2."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "popsynth"
    try:
        r2 = r_squared(pairs)
    except DataError:
        r2 = None
    xs = [p[0] for p in pairs]
    ys = [p[1] for p in pairs]
    top = max(xs + ys + [1])
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot([0, top], [0, top], color="0.5", linewidth=1, label="identity")
    ax.scatter(xs, ys, s=14)
    ax.set_xlabel(f"real {attr} count")
    ax.set_ylabel(f"synthetic {attr} count")
    label = f"R² = {r2:.4f}" if r2 is not None else "R² undefined"
    ax.text(0.05, 0.92, label, transform=ax.transAxes)
    ax.set_xlim(0, top * 1.05)
    ax.set_ylim(0, top * 1.05)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return r2


def cmd_evaluate(args) -> int:
    _require(args, "schema", "synthetic")
    if (args.reference is None) == (args.reference_marginals is None):
        raise UsageError("evaluate: give exactly one of --reference or --reference-marginals")
    started = _now()
    schema = load_schema(_load_inputs(args.schema, "schema"))
    recode = _work_recode(schema, args.recode_work)
    synth = parse_population(_load_inputs(args.synthetic, "synthetic"), schema, Provenance.SYNTHETIC)
    if len(synth) == 0:
        raise DataError("synthetic population is empty")
    synth = recode_population(synth, recode)
    synth_zones = _split_by_zone(synth, _zone_labels(args.synthetic, args.zone_column))
    conditioned = tuple(args.conditioned.split(",")) if args.conditioned else ()

    if args.reference is not None:
        real = recode_population(parse_population(_load_inputs(args.reference, "reference"), schema), recode)
        if len(real) == 0:
            raise DataError("reference population is empty")
        real_zones = _split_by_zone(real, _zone_labels(args.reference, args.zone_column))
        if "" not in synth_zones and set(real_zones) - {""}:
            # zoned synthetic output is compared with the zoned part of the reference only
            real_zones.pop("", None)
            real = Population.concat(list(real_zones.values()))
        report = evaluate(real, synth, conditioned, exclude_na=args.exclude_na)
        attr = args.scatter_attr or schema.names[-1]
        real_counts = {z: aggregate_marginals(p, [attr], z) for z, p in real_zones.items()}
    else:
        tables = _load_targets(_load_inputs(args.reference_marginals, "reference marginals"), schema, recode)
        if not tables:
            raise DataError("reference marginals are empty")
        attrs = tables[0].attrs
        pooled: dict = {}
        for t in tables:
            for k, v in t.cells.items():
                pooled[k] = pooled.get(k, 0) + v
        report = evaluate_against_targets(synth, MarginalTable("", attrs, pooled), conditioned)
        attr = args.scatter_attr or attrs[-1]
        real_counts = {t.zone_id: t for t in tables}
        if set(synth_zones) == {""} and len(real_counts) == 1:
            synth_zones = {next(iter(real_counts)): synth}

    out = _out_dir(args)
    report_path = out / "report.csv"
    report.to_csv(report_path)
    svg = out / "scatter.svg"
    r2 = write_scatter_svg(scatter_pairs(real_counts, synth_zones, attr), attr, svg)
    config = _config_of(args)
    config["r_squared"] = r2
    write_manifest(out, "evaluate", config,
                   {"schema": args.schema, "synthetic": args.synthetic, "reference": args.reference,
                    "reference_marginals": args.reference_marginals}, None, [report_path, svg], started)
    print(f"R2 {attr}: {'undefined' if r2 is None else f'{r2:.6f}'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gen-world

def cmd_gen_world(args) -> int:
    _require(args, "spec")
    started = _now()
    spec = load_ground_truth_spec(_load_inputs(args.spec, "spec"))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    world = generate_ground_truth(spec)
    out = _out_dir(args)
    gt = out / "ground_truth.csv"
    emit_population(world.ground_truth, gt, extra={"zone_id": world.zone_of})
    ms = out / "micro_sample.csv"
    emit_population(world.micro_sample, ms)
    tg = out / "targets.csv"
    if world.zone_targets:
        emit_marginals(world.zone_targets, spec.schema, tg)
    else:
        tg.write_text("zone_id,count\n", encoding="utf-8")
    sc = out / "schema.json"
    save_schema(spec.schema, sc)
    write_manifest(out, "gen-world", _config_of(args), {"spec": args.spec}, spec.seed, [gt, ms, tg, sc], started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="popsynth", description="Synthetic population generation and evaluation.")
    p.add_argument("--version", action="version", version=f"popsynth {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the conditional generator on a micro-sample")
    t.add_argument("--schema", type=Path)
    t.add_argument("--micro-sample", type=Path)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--z-dim", type=int)
    t.add_argument("--pac", type=int)
    t.add_argument("--out-dir", type=Path, required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", help="synthesize zone populations with one or more strategies")
    s.add_argument("--config", type=Path, help="experiment config JSON; flags override its values")
    s.add_argument("--schema", type=Path)
    s.add_argument("--micro-sample", type=Path)
    s.add_argument("--targets", type=Path)
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--strategy", action="append", choices=[x.value for x in Strategy])
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--pool-multiplier", type=int)
    s.add_argument("--rssz-threshold", type=float)
    s.add_argument("--budget-factor", type=float)
    s.add_argument("--max-iterations", type=int)
    s.add_argument("--restarts", type=int)
    s.add_argument("--no-recode-work", action="store_true", help="compare WORK with all three categories")
    s.add_argument("--out-dir", type=Path, required=True)
    s.set_defaults(func=cmd_synthesize)

    e = sub.add_parser("evaluate", help="score a synthetic population against a reference")
    e.add_argument("--schema", type=Path)
    e.add_argument("--synthetic", type=Path)
    e.add_argument("--reference", type=Path, help="reference population CSV")
    e.add_argument("--reference-marginals", type=Path, help="reference zone marginals CSV")
    e.add_argument("--zone-column", default="zone_id")
    e.add_argument("--scatter-attr")
    e.add_argument("--conditioned", help="comma-separated conditioned attributes")
    e.add_argument("--exclude-na", action="store_true")
    e.add_argument("--recode-work", action="store_true", help="merge part-time into working on both sides, as synthesize does")
    e.add_argument("--out-dir", type=Path, required=True)
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gen-world", help="draw a synthetic ground truth, micro-sample and zone targets")
    g.add_argument("--spec", type=Path)
    g.add_argument("--seed", type=int, help="overrides the spec's seed")
    g.add_argument("--out-dir", type=Path, required=True)
    g.set_defaults(func=cmd_gen_world)
    return p


def _setup_logging() -> None:
    level = os.environ.get("POPSYNTH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"popsynth: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ctgan.TrainingDivergence as exc:
        print(f"popsynth: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, KeyError) as exc:
        print(f"popsynth: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"popsynth: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
