"""Correspondence evaluation: nearest neighbors, cluster patterns, stability
across seeds, paired-point error and held-out-feature correlation."""

from __future__ import annotations

import csv
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .data import DomainDataset, holdout_split
from .errors import ContractError, DimensionError, UndefinedCorrelationError

logger = logging.getLogger(__name__)

_CHUNK = 2048


def nearest_neighbor_correspondence(mapped, target) -> np.ndarray:
    """Index of the Euclidean-nearest ``target`` row for every ``mapped`` row.

    Ties go to the lowest index. Squared distances are computed pairwise
    rather than through the ``|a|^2 - 2ab + |b|^2`` expansion, so exact ties
    stay exact.
    """
    mapped = np.atleast_2d(np.asarray(mapped, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if target.shape[0] == 0 or target.size == 0:
        raise ContractError("nearest-neighbor search needs a non-empty target")
    if mapped.shape[1] != target.shape[1]:
        raise DimensionError(
            f"mapped points have {mapped.shape[1]} columns but targets have {target.shape[1]}"
        )
    out = np.empty(mapped.shape[0], dtype=np.intp)
    for lo in range(0, mapped.shape[0], _CHUNK):
        block = cdist(mapped[lo : lo + _CHUNK], target, "sqeuclidean")
        out[lo : lo + _CHUNK] = block.argmin(axis=1)
    return out


@dataclass
class ClusterAssignment:
    """Plurality map from source clusters to destination clusters."""

    mapping: dict[int, int]
    fractions: dict[int, float]
    counts: dict[int, int]

    @property
    def is_identity(self) -> bool:
        return all(k == v for k, v in self.mapping.items())

    def key(self) -> str:
        return ",".join(f"{k}>{v}" for k, v in sorted(self.mapping.items()))

    def to_dict(self) -> dict:
        return {
            "mapping": {str(k): v for k, v in self.mapping.items()},
            "fractions": {str(k): v for k, v in self.fractions.items()},
            "counts": {str(k): v for k, v in self.counts.items()},
        }


def cluster_assignment(assignments, labels_src, labels_dst) -> ClusterAssignment:
    """Send each source cluster to the destination label most of its points hit.

    ``assignments[i]`` is the destination row matched to source row ``i``.
    Plurality ties go to the lowest destination label.
    """
    if labels_src is None or labels_dst is None:
        raise ContractError("cluster assignment needs class labels on both sides")
    a = np.asarray(assignments, dtype=np.intp)
    src = np.asarray(labels_src)
    dst = np.asarray(labels_dst)
    if len(a) != len(src):
        raise DimensionError(f"{len(a)} assignments for {len(src)} labelled source rows")
    if len(a) and (a.min() < 0 or a.max() >= len(dst)):
        raise ContractError("assignment index outside the destination rows")
    hit = dst[a]
    dst_labels = np.unique(dst)
    mapping, fractions, counts = {}, {}, {}
    for c in np.unique(src):
        votes = hit[src == c]
        tally = np.array([(votes == d).sum() for d in dst_labels])
        best = int(np.argmax(tally))
        mapping[int(c)] = int(dst_labels[best])
        fractions[int(c)] = float(tally[best] / len(votes))
        counts[int(c)] = int(len(votes))
    return ClusterAssignment(mapping, fractions, counts)


def _aligned(ds1: DomainDataset, ds2: DomainDataset) -> tuple[np.ndarray, np.ndarray]:
    if ds1.pair_ids is None or ds2.pair_ids is None:
        raise ContractError("correspondence error needs pair_ids on both datasets")
    pos2 = {p: j for j, p in enumerate(ds2.pair_ids)}
    i1 = [i for i, p in enumerate(ds1.pair_ids) if p in pos2]
    if not i1:
        raise ContractError("the datasets share no pair_ids")
    i2 = [pos2[ds1.pair_ids[i]] for i in i1]
    return np.asarray(i1, dtype=np.intp), np.asarray(i2, dtype=np.intp)


def correspondence_error(model, ds1: DomainDataset, ds2: DomainDataset) -> tuple[float, float]:
    """``(mse(x1, G21(x2)), mse(x2, G12(x1)))`` over rows paired by ``pair_ids``.

    MSE is averaged over every element of the paired matrices.
    """
    from .model import map_forward

    i1, i2 = _aligned(ds1, ds2)
    x1, x2 = ds1.matrix[i1], ds2.matrix[i2]
    e1 = float(np.mean((x1 - map_forward(model, x2, "21")) ** 2))
    e2 = float(np.mean((x2 - map_forward(model, x1, "12")) ** 2))
    return e1, e2


def holdout_correlation(true_values, predicted) -> float:
    """Pearson correlation between held-out values and their predictions."""
    t = np.asarray(true_values, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if len(t) != len(p):
        raise DimensionError(f"{len(t)} true values but {len(p)} predictions")
    if len(t) < 2:
        raise ContractError("correlation needs at least two points")
    t = t - t.mean()
    p = p - p.mean()
    st, sp = np.sqrt(t @ t), np.sqrt(p @ p)
    if st == 0 or sp == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant vector")
    return float(np.clip((t @ p) / (st * sp), -1.0, 1.0))


@dataclass
class CorrespondenceReport:
    assign_12: np.ndarray
    assign_21: np.ndarray
    clusters_12: Optional[ClusterAssignment] = None
    clusters_21: Optional[ClusterAssignment] = None
    mse_1_from_2: Optional[float] = None
    mse_2_from_1: Optional[float] = None
    holdout: dict[str, float] = field(default_factory=dict)
    seed: Optional[int] = None
    config_digest: Optional[str] = None

    def pattern(self) -> Optional[str]:
        if self.clusters_12 is None or self.clusters_21 is None:
            return None
        return f"12:{self.clusters_12.key()}|21:{self.clusters_21.key()}"

    def is_identity(self) -> bool:
        return bool(
            self.clusters_12 and self.clusters_21
            and self.clusters_12.is_identity and self.clusters_21.is_identity
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config_digest": self.config_digest,
            "assign_12": self.assign_12.tolist(),
            "assign_21": self.assign_21.tolist(),
            "clusters_12": self.clusters_12.to_dict() if self.clusters_12 else None,
            "clusters_21": self.clusters_21.to_dict() if self.clusters_21 else None,
            "pattern": self.pattern(),
            "mse_1_from_2": self.mse_1_from_2,
            "mse_2_from_1": self.mse_2_from_1,
            "holdout": self.holdout,
        }

    def metrics(self) -> dict[str, float]:
        out = {}
        if self.mse_1_from_2 is not None:
            out["mse_1_from_2"] = self.mse_1_from_2
            out["mse_2_from_1"] = self.mse_2_from_1
        for tag, ca in (("12", self.clusters_12), ("21", self.clusters_21)):
            if ca is not None:
                for c, f in ca.fractions.items():
                    out[f"cluster_fraction_{tag}_{c}"] = f
        for name, r in self.holdout.items():
            out[f"holdout_r_{name}"] = r
        return out


def evaluate_model(model, ds1: DomainDataset, ds2: DomainDataset) -> CorrespondenceReport:
    """Map both domains and collect every metric the data supports."""
    from .model import map_forward

    x12 = map_forward(model, ds1.matrix, "12")
    x21 = map_forward(model, ds2.matrix, "21")
    report = CorrespondenceReport(
        assign_12=nearest_neighbor_correspondence(x12, ds2.matrix),
        assign_21=nearest_neighbor_correspondence(x21, ds1.matrix),
        seed=model.config.seed,
        config_digest=model.config.digest(),
    )
    if ds1.class_labels is not None and ds2.class_labels is not None:
        report.clusters_12 = cluster_assignment(report.assign_12, ds1.class_labels, ds2.class_labels)
        report.clusters_21 = cluster_assignment(report.assign_21, ds2.class_labels, ds1.class_labels)
    if ds1.pair_ids is not None and ds2.pair_ids is not None:
        report.mse_1_from_2, report.mse_2_from_1 = correspondence_error(model, ds1, ds2)
    return report


@dataclass
class RunOutcome:
    seed: int
    report: Optional[CorrespondenceReport] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class StabilitySummary:
    n_runs: int
    frequencies: dict[str, int]
    runs: list[RunOutcome]

    @property
    def n_failed(self) -> int:
        return sum(not r.ok for r in self.runs)

    def identity_count(self) -> int:
        return sum(1 for r in self.runs if r.ok and r.report.is_identity())

    def to_dict(self) -> dict:
        return {
            "n_runs": self.n_runs,
            "n_failed": self.n_failed,
            "identity_count": self.identity_count(),
            "frequencies": self.frequencies,
            "runs": [
                {"seed": r.seed, "error": r.error, "report": r.report.to_dict() if r.report else None}
                for r in self.runs
            ],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pattern", "count"])
            for key, n in sorted(self.frequencies.items(), key=lambda kv: (-kv[1], kv[0])):
                w.writerow([key, n])


FAILED = "failed"


def _one_run(factory, config, seed: int) -> RunOutcome:
    from .model import train

    try:
        ds1, ds2 = factory(seed)
        model, _ = train(ds1, ds2, config.model_copy(update={"seed": seed}))
        return RunOutcome(seed, report=evaluate_model(model, ds1, ds2))
    except Exception as exc:  # a failed run is data, not a crash
        logger.warning("run with seed %d failed: %s", seed, exc)
        return RunOutcome(seed, error="".join(traceback.format_exception_only(type(exc), exc)).strip())


def stability_simulation(
    factory: Callable[[int], tuple[DomainDataset, DomainDataset]],
    config,
    n_runs: int,
    base_seed: int = 0,
    jobs: int = 1,
    on_result: Callable[[RunOutcome], None] | None = None,
) -> StabilitySummary:
    """Train ``n_runs`` models with seeds ``base_seed, base_seed+1, ...``.

    ``factory(seed)`` returns the two labelled domains for a run. With
    ``jobs > 1`` runs go to a process pool; ``factory`` must then be
    picklable (a module-level function or ``functools.partial``). Results
    do not depend on ``jobs``. ``on_result`` sees each run as it finishes.
    """
    if n_runs < 1:
        raise ContractError(f"n_runs must be at least 1, got {n_runs}")
    seeds = list(range(base_seed, base_seed + n_runs))
    runs: list[RunOutcome] = []
    if jobs > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, n_runs)) as pool:
            futures = [pool.submit(_one_run, factory, config, s) for s in seeds]
            for fut in as_completed(futures):
                runs.append(fut.result())
                if on_result is not None:
                    on_result(runs[-1])
    else:
        for s in seeds:
            runs.append(_one_run(factory, config, s))
            if on_result is not None:
                on_result(runs[-1])
    runs.sort(key=lambda r: r.seed)
    freq: dict[str, int] = {}
    for r in runs:
        key = (r.report.pattern() or "unlabelled") if r.ok else FAILED
        freq[key] = freq.get(key, 0) + 1
    return StabilitySummary(n_runs=n_runs, frequencies=freq, runs=runs)


@dataclass
class FoldResult:
    feature: str
    r: Optional[float]
    status: str
    true_values: Optional[np.ndarray] = None
    predicted: Optional[np.ndarray] = None


@dataclass
class CrossvalResult:
    folds: list[FoldResult]
    notice: str = ""

    def correlations(self) -> dict[str, Optional[float]]:
        return {f.feature: f.r for f in self.folds}

    def to_dict(self) -> dict:
        return {
            "notice": self.notice,
            "folds": [{"feature": f.feature, "r": f.r, "status": f.status} for f in self.folds],
        }

    def write_scatter_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "true", "predicted"])
            for f in self.folds:
                if f.true_values is None:
                    continue
                for t, p in zip(f.true_values, f.predicted):
                    w.writerow([f.feature, repr(float(t)), repr(float(p))])


def crossval_shared_features(
    train_fn: Callable,
    ds1: DomainDataset,
    ds2: DomainDataset,
    config,
    features: Sequence[str] | None = None,
) -> CrossvalResult:
    """Leave-one-out over shared features.

    For each shared feature: drop it from domain 1, retrain from scratch
    with ``train_fn(ds1_without, ds2, config)``, map domain 1 into domain 2
    and correlate the prediction for that feature with its true domain-1
    values. A failing fold is recorded and the others still run.
    """
    from .model import map_forward

    shared = [n for n in ds1.feature_names if n in set(ds2.feature_names)]
    if features is not None:
        missing = [f for f in features if f not in shared]
        if missing:
            raise ContractError(f"not shared between the domains: {missing}")
        shared = list(features)
    if not shared:
        return CrossvalResult([], notice="no shared features; nothing to cross-validate")
    if config.correspondence_mode == "unsupervised":
        config = config.model_copy(update={"shared_feature_indices": None})
    folds = []
    for name in shared:
        try:
            reduced, true = holdout_split(ds1, name)
            model = train_fn(reduced, ds2, config)
            pred = map_forward(model, reduced.matrix, "12")[:, ds2.feature_index(name)]
            folds.append(FoldResult(name, holdout_correlation(true, pred), "ok", true, pred))
        except Exception as exc:
            logger.warning("holdout fold %s failed: %s", name, exc)
            folds.append(FoldResult(name, None, f"failed: {exc}"))
    return CrossvalResult(folds)


def write_report_json(report: CorrespondenceReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_metrics_csv(metrics: dict[str, float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, "" if v is None else repr(float(v))])


def summary_as_json(obj) -> str:
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    elif hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    return json.dumps(obj, indent=2, sort_keys=True)
