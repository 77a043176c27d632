"""``magan`` command-line entry point.

Exit codes: 0 success, 1 runtime or data error, 2 usage error. Paths of
written files go to stdout; progress and diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import functools
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__
from .checkpoint import load_model, save_model
from .data import (
    DistortionSpec,
    DomainDataset,
    default_gaussian_spec,
    gen_gaussian_domains,
    gen_paired_tabular,
    load_table_csv,
    rotated_digit_domains,
    write_table_csv,
)
from .errors import ConfigError, ContractError, MaganError, TrainingDivergence
from .evaluation import (
    cluster_assignment,
    correspondence_error,
    holdout_correlation,
    nearest_neighbor_correspondence,
    stability_simulation,
    write_metrics_csv,
)
from .model import LossRecord, TrainConfig, map_forward, train, write_history_csv

SEED_ENV = "MAGAN_SEED"
METRICS = ("corr-error", "holdout", "assignment")
METRIC_NEEDS = {
    "corr-error": "__pair_id columns in both domain files",
    "holdout": "--feature naming a column of domain 1 and domain 2 that the model's domain-1 side lacks",
    "assignment": "__class columns in both domain files",
}


class UsageError(Exception):
    """Bad flag values detected after parsing; exits with code 2."""


@dataclass
class RunManifest:
    command: str
    version: str = __version__
    config: dict | None = None
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    status: str = "running"
    duration_s: float = 0.0
    details: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        tmp = path.with_name("manifest.json.tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
        return path


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _default_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            out[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            out[key.strip()] = value
    return out


def build_config(config_path, overrides: list[str], seed: int | None) -> TrainConfig:
    """Config file, then ``--set`` overrides, then the seed fallback chain."""
    base = {}
    if config_path is not None:
        try:
            base = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON: {exc}") from None
        if not isinstance(base, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
    base.update(_parse_set(overrides))
    if seed is not None:
        base["seed"] = seed
    elif "seed" not in base:
        env = _default_seed()
        if env is not None:
            base["seed"] = env
    try:
        return TrainConfig.model_validate(base)
    except ValidationError as exc:
        raise ConfigError(f"invalid training config:\n{exc}") from None


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(paths) -> None:
    for p in paths:
        print(p)


# --------------------------------------------------------------------------- gendata


def cmd_gendata(args) -> int:
    t0 = time.perf_counter()
    seed = args.seed if args.seed is not None else _default_seed()
    seed = 0 if seed is None else seed
    out = _out_dir(args.out)
    details: dict = {"kind": args.kind}
    inputs = {}
    if args.kind == "gaussian":
        ds1, ds2 = gen_gaussian_domains(default_gaussian_spec(args.points_per_cluster), seed)
        details["points_per_cluster"] = args.points_per_cluster
    elif args.kind == "digits-rotated":
        if (args.images is None) != (args.labels is None):
            raise UsageError("--images and --labels must be given together")
        ds1, ds2 = rotated_digit_domains(args.images, args.labels, args.degrees)
        details["degrees"] = args.degrees
        if args.images is not None:
            inputs = {str(args.images): file_digest(args.images), str(args.labels): file_digest(args.labels)}
    else:
        ds1, ds2 = gen_paired_tabular(
            seed, n=args.n, d=args.d, d_shared=args.shared,
            distortion=DistortionSpec(kind=args.distortion, noise=args.noise),
        )
        details.update(n=args.n, d=args.d, shared=args.shared, distortion=args.distortion, noise=args.noise)
    p1, p2 = out / "domain1.csv", out / "domain2.csv"
    write_table_csv(ds1, p1)
    write_table_csv(ds2, p2)
    manifest = RunManifest(
        "gendata", seed=seed, inputs=inputs, outputs=[str(p1), str(p2)], status="complete", details=details
    )
    manifest.duration_s = time.perf_counter() - t0
    _emit([p1, p2, manifest.write(out)])
    return 0


# --------------------------------------------------------------------------- train


def _progress(rec: LossRecord) -> None:
    print(
        f"iter {rec.iteration}: L_G1={rec.L_G1:.6g} L_G2={rec.L_G2:.6g} "
        f"L_D1={rec.L_D1:.6g} L_D2={rec.L_D2:.6g}",
        file=sys.stderr,
        flush=True,
    )


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    config = build_config(args.config, args.set, args.seed)
    ds1, ds2 = load_table_csv(args.domain1), load_table_csv(args.domain2)
    out = _out_dir(args.out)
    manifest = RunManifest(
        "train",
        config=config.model_dump(mode="json"),
        seed=config.seed,
        inputs={str(args.domain1): file_digest(args.domain1), str(args.domain2): file_digest(args.domain2)},
    )
    ckpt = out / "model.magan"
    try:
        model, history = train(ds1, ds2, config, progress=_progress, checkpoint_path=ckpt)
    except TrainingDivergence as exc:
        manifest.status = f"diverged at iteration {exc.iteration}"
        manifest.duration_s = time.perf_counter() - t0
        manifest.write(out)
        raise
    hist = out / "history.csv"
    save_model(model, ckpt)
    write_history_csv(history, hist)
    manifest.outputs = [str(ckpt), str(hist)]
    manifest.status = "complete"
    manifest.duration_s = time.perf_counter() - t0
    _emit([ckpt, hist, manifest.write(out)])
    return 0


# --------------------------------------------------------------------------- map


def cmd_map(args) -> int:
    model = load_model(args.model)
    ds = load_table_csv(args.input)
    if ds.n_rows == 0:
        raise ContractError(f"{args.input} contains no rows")
    key = args.direction
    mapped = map_forward(model, ds.matrix, key)
    names = model.names2 if key == "12" else model.names1
    result = DomainDataset(mapped, list(names), class_labels=ds.class_labels, pair_ids=ds.pair_ids)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table_csv(result, out)
    _emit([out])
    return 0


# --------------------------------------------------------------------------- evaluate


def _missing_prereqs(metrics, model, ds1, ds2, feature) -> list[str]:
    missing = []
    for m in metrics:
        if m == "corr-error" and (ds1.pair_ids is None or ds2.pair_ids is None):
            missing.append(m)
        elif m == "assignment" and (ds1.class_labels is None or ds2.class_labels is None):
            missing.append(m)
        elif m == "holdout" and (
            feature is None
            or feature not in ds1.feature_names
            or feature not in ds2.feature_names
            or feature in model.names1
        ):
            missing.append(m)
    return missing


def _columns(ds: DomainDataset, names: list[str]) -> np.ndarray:
    try:
        return ds.matrix[:, [ds.feature_index(n) for n in names]]
    except KeyError as exc:
        raise ContractError(f"domain file lacks a feature the model was trained on: {exc}") from None


def evaluate_metrics(model, ds1: DomainDataset, ds2: DomainDataset, metrics, feature=None) -> dict:
    """The library calls behind ``magan evaluate``; returns the JSON report."""
    report: dict = {"metrics": {}, "config_digest": model.config.digest(), "seed": model.config.seed}
    x1 = _columns(ds1, model.names1)
    x2 = _columns(ds2, model.names2)
    if "corr-error" in metrics:
        aligned1 = ds1.with_matrix(x1, model.names1)
        aligned2 = ds2.with_matrix(x2, model.names2)
        e1, e2 = correspondence_error(model, aligned1, aligned2)
        report["metrics"]["mse_1_from_2"] = e1
        report["metrics"]["mse_2_from_1"] = e2
    if "holdout" in metrics:
        pred = map_forward(model, x1, "12")[:, model.names2.index(feature)]
        true = ds1.column(feature)
        report["metrics"][f"holdout_r_{feature}"] = holdout_correlation(true, pred)
        report["holdout_scatter"] = {"true": true.tolist(), "predicted": pred.tolist()}
    if "assignment" in metrics:
        for tag, src, dst, X, key in (("12", ds1, ds2, x1, "12"), ("21", ds2, ds1, x2, "21")):
            target = x2 if tag == "12" else x1
            mapped = map_forward(model, X, key)
            nn = nearest_neighbor_correspondence(mapped, target)
            ca = cluster_assignment(nn, src.class_labels, dst.class_labels)
            report[f"clusters_{tag}"] = ca.to_dict()
            report[f"mapped_{tag}"] = mapped.tolist()
            for c, f in ca.fractions.items():
                report["metrics"][f"cluster_fraction_{tag}_{c}"] = f
    return report


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    ds1, ds2 = load_table_csv(args.domain1), load_table_csv(args.domain2)
    metrics = list(dict.fromkeys(args.metric or METRICS[:1]))
    missing = _missing_prereqs(metrics, model, ds1, ds2, args.feature)
    if missing:
        lines = "\n".join(f"  {m}: needs {METRIC_NEEDS[m]}" for m in missing)
        raise ContractError(f"metric prerequisites not met:\n{lines}")
    report = evaluate_metrics(model, ds1, ds2, metrics, args.feature)
    out = _out_dir(args.out)
    written = []
    if "holdout_scatter" in report:
        scatter = report.pop("holdout_scatter")
        p = out / f"holdout_{args.feature}.csv"
        with open(p, "w", encoding="utf-8") as fh:
            fh.write("true,predicted\n")
            for t, q in zip(scatter["true"], scatter["predicted"]):
                fh.write(f"{t!r},{q!r}\n")
        written.append(p)
    for tag in ("12", "21"):
        mapped = report.pop(f"mapped_{tag}", None)
        if mapped is not None:
            src = ds1 if tag == "12" else ds2
            names = model.names2 if tag == "12" else model.names1
            p = out / f"mapped_{tag}.csv"
            write_table_csv(
                DomainDataset(np.asarray(mapped), list(names), src.class_labels, src.pair_ids), p
            )
            written.append(p)
    pj, pc = out / "report.json", out / "metrics.csv"
    pj.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_metrics_csv(report["metrics"], pc)
    _emit([pj, pc, *written])
    return 0


# --------------------------------------------------------------------------- simulate


def _csv_pair(path1, path2, seed):
    return load_table_csv(path1), load_table_csv(path2)


def _gaussian_pair(data_seed, seed):
    return gen_gaussian_domains(default_gaussian_spec(), data_seed)


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    if args.runs < 1:
        raise UsageError(f"--runs must be at least 1, got {args.runs}")
    if args.jobs < 1:
        raise UsageError(f"--jobs must be at least 1, got {args.jobs}")
    if (args.domain1 is None) != (args.domain2 is None):
        raise UsageError("--domain1 and --domain2 must be given together")
    config = build_config(args.config, args.set, None)
    base_seed = args.base_seed if args.base_seed is not None else config.seed
    out = _out_dir(args.out)
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    if args.domain1 is not None:
        factory = functools.partial(_csv_pair, str(args.domain1), str(args.domain2))
        inputs = {str(args.domain1): file_digest(args.domain1), str(args.domain2): file_digest(args.domain2)}
    else:
        factory = functools.partial(_gaussian_pair, args.data_seed)
        inputs = {}
    seeds = list(range(base_seed, base_seed + args.runs))
    manifest = RunManifest(
        "simulate",
        config=config.model_dump(mode="json"),
        seed=base_seed,
        inputs=inputs,
        status="incomplete",
        details={"runs": {str(s): "pending" for s in seeds}},
    )
    manifest.write(out)

    def record(outcome):
        p = runs_dir / f"run_{outcome.seed}.json"
        body = {"seed": outcome.seed, "error": outcome.error}
        if outcome.ok:
            body["report"] = outcome.report.to_dict()
        p.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        manifest.details["runs"][str(outcome.seed)] = "ok" if outcome.ok else "failed"
        manifest.outputs.append(str(p))
        manifest.duration_s = time.perf_counter() - t0
        manifest.write(out)
        print(f"run {outcome.seed}: {'ok' if outcome.ok else outcome.error}", file=sys.stderr, flush=True)

    summary = stability_simulation(
        factory, config, args.runs, base_seed=base_seed, jobs=args.jobs, on_result=record
    )
    pj, pc = out / "summary.json", out / "frequencies.csv"
    summary.write_json(pj)
    summary.write_csv(pc)
    manifest.outputs = sorted(manifest.outputs) + [str(pj), str(pc)]
    manifest.status = "complete"
    manifest.details["identity_count"] = summary.identity_count()
    manifest.duration_s = time.perf_counter() - t0
    _emit([pj, pc, manifest.write(out)])
    return 0 if summary.n_failed < summary.n_runs else 1


# --------------------------------------------------------------------------- schema


def cmd_schema(args) -> int:
    print(json.dumps(TrainConfig.model_json_schema(), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="magan", description="Manifold-aligning GAN toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gendata", help="write a synthetic or digit dataset pair as CSV")
    gsub = g.add_subparsers(dest="kind", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, type=Path, help="output directory")
    common.add_argument("--seed", type=int, default=None, help=f"defaults to ${SEED_ENV}, else 0")
    ga = gsub.add_parser("gaussian", parents=[common], help="three Gaussian clusters per domain")
    ga.add_argument("--points-per-cluster", type=int, default=500)
    gd = gsub.add_parser("digits-rotated", parents=[common], help="3s and 7s vs their rotations")
    gd.add_argument("--images", type=Path, default=None, help="IDX image file (default: bundled subset)")
    gd.add_argument("--labels", type=Path, default=None, help="IDX label file")
    gd.add_argument("--degrees", type=float, default=120.0)
    gp = gsub.add_parser("paired-tabular", parents=[common], help="two views with shared columns")
    gp.add_argument("--n", type=int, default=2000)
    gp.add_argument("--d", type=int, default=20)
    gp.add_argument("--shared", type=int, default=10)
    gp.add_argument("--distortion", choices=("identity", "nonlinear"), default="nonlinear")
    gp.add_argument("--noise", type=float, default=0.05)
    g.set_defaults(func=cmd_gendata)

    config_flags = argparse.ArgumentParser(add_help=False)
    config_flags.add_argument("--config", type=Path, default=None, help="JSON training config")
    config_flags.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field"
    )

    t = sub.add_parser("train", parents=[config_flags], help="train a model")
    t.add_argument("--domain1", required=True, type=Path)
    t.add_argument("--domain2", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("map", help="map a CSV through a trained generator")
    m.add_argument("--model", required=True, type=Path)
    m.add_argument("--input", required=True, type=Path)
    m.add_argument("--direction", required=True, choices=("12", "21"))
    m.add_argument("--out", required=True, type=Path)
    m.set_defaults(func=cmd_map)

    e = sub.add_parser("evaluate", help="correspondence metrics for a trained model")
    e.add_argument("--model", required=True, type=Path)
    e.add_argument("--domain1", required=True, type=Path)
    e.add_argument("--domain2", required=True, type=Path)
    e.add_argument("--metric", action="append", choices=METRICS, help="repeatable; default corr-error")
    e.add_argument("--feature", default=None, help="held-out feature for --metric holdout")
    e.add_argument("--out", required=True, type=Path)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("simulate", parents=[config_flags], help="repeated training stability study")
    s.add_argument("--runs", type=int, required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--base-seed", type=int, default=None, help="first run seed (default: config seed)")
    s.add_argument("--domain1", type=Path, default=None, help="default: the Gaussian toy")
    s.add_argument("--domain2", type=Path, default=None)
    s.add_argument("--data-seed", type=int, default=0, help="seed for the Gaussian toy data")
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_simulate)

    sc = sub.add_parser("schema", help="print the training config JSON schema")
    sc.set_defaults(func=cmd_schema)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"magan: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergence as exc:
        print(f"magan: training diverged at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return 1
    except (MaganError, OSError, KeyError) as exc:
        print(f"magan: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
