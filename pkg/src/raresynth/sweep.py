"""Synthetic-to-real ratio sweep with stratified cross-validation.

For every (condition, fold, seed) the classifier is trained on the fold's real
training split plus a prefix of the synthetic pool, then scored on the fold's
real-only test split. Test splits depend only on (fold, seed), so every
condition is evaluated on exactly the same images.

Seed derivation (all via :func:`raresynth.rng.derive_seed`):

* fold plan for seed value ``s``: ``(global, "folds", s)``
* pool permutation: ``(global, "assemble", fold, seed_index)``, shared by all
  ratios, which makes smaller-ratio selections prefixes of larger ones
* classifier: ``(global, "run", ratio_index, mode_index, fold, seed_index)``
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import multiprocessing as mp
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable

import torch

from .classifier import TrainConfig, predict_scores, train_classifier
from .config import PipelineConfig
from .data import SYNTHETIC, Dataset, assemble_training_set
from .errors import InvalidArgument, RareSynthError
from .metrics import ConfusionCounts, confusion_at_threshold, f1_precision_recall, pr_auc, stratified_kfold
from .rng import derive_seed

log = logging.getLogger(__name__)

MODES = ("mixed", "synth_only")
RESULT_COLUMNS = (
    "domain", "mode", "ratio", "fold", "seed", "f1", "pr_auc", "recall", "precision",
    "tp", "fp", "fn", "tn", "wall_seconds",
)  # fmt: skip
METRICS = ("f1", "pr_auc", "recall", "precision")
AGGREGATE_COLUMNS = ("domain", "mode", "ratio", "n_runs") + tuple(f"{m}_{s}" for m in METRICS for s in ("mean", "std"))


def fmt(x: float) -> str:
    """Six significant digits, the fixed float format of every CSV."""
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.6g}"


@dataclass(frozen=True)
class RunResult:
    domain: str
    mode: str
    ratio: float
    fold: int
    seed: int
    f1: float
    pr_auc: float
    recall: float
    precision: float
    counts: ConfusionCounts
    wall_seconds: float
    test_ids: tuple[str, ...] = ()
    n_synthetic: int = 0
    n_real_pos: int = 0

    @property
    def sort_key(self) -> tuple:
        return (MODES.index(self.mode), self.ratio, self.seed, self.fold)

    def csv_row(self, record_wall_time: bool = False) -> list[str]:
        c = self.counts
        return [
            self.domain, self.mode, fmt(self.ratio), str(self.fold), str(self.seed),
            fmt(self.f1), fmt(self.pr_auc), fmt(self.recall), fmt(self.precision),
            str(c.tp), str(c.fp), str(c.fn), str(c.tn),
            fmt(self.wall_seconds) if record_wall_time else "",
        ]  # fmt: skip


@dataclass
class RunTask:
    key: tuple[int, int, int, int]  # (ratio_index, mode_index, fold, seed_index)
    domain: str
    mode: str
    ratio: float
    fold: int
    seed: int
    train: Dataset
    test: Dataset
    clf: TrainConfig
    threshold: float


def execute(task: RunTask) -> RunResult:
    """Train and evaluate one run. Single-threaded so results do not depend on scheduling."""
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        t0 = time.perf_counter()
        model, _ = train_classifier(task.train, task.clf)
        scores = predict_scores(model, task.test.images())
        labels = task.test.labels()
        counts = confusion_at_threshold(scores, labels, task.threshold)
        f1, precision, recall = f1_precision_recall(counts)
        ap = pr_auc(scores, labels)
        wall = time.perf_counter() - t0
    finally:
        torch.set_num_threads(threads)
    return RunResult(
        domain=task.domain,
        mode=task.mode,
        ratio=task.ratio,
        fold=task.fold,
        seed=task.seed,
        f1=f1,
        pr_auc=ap,
        recall=recall,
        precision=precision,
        counts=counts,
        wall_seconds=wall,
        test_ids=tuple(task.test.ids),
        n_synthetic=task.train.count(origin=SYNTHETIC),
        n_real_pos=task.train.count(label="positive", origin="real"),
    )


def conditions(ratios: tuple[float, ...], include_synth_only: bool) -> list[tuple[int, str, float]]:
    """``(ratio_index, mode, ratio)`` for every evaluated condition.

    Synth-only runs only at the largest ratio (and only if it is positive).
    """
    out = [(i, "mixed", r) for i, r in enumerate(ratios)]
    if include_synth_only and ratios and ratios[-1] > 0:
        out.append((len(ratios) - 1, "synth_only", ratios[-1]))
    return out


PoolProvider = Callable[[int, int, Dataset], Dataset]


def plan_runs(cfg: PipelineConfig, real: Dataset, pool_for: PoolProvider) -> list[RunTask]:
    """Expand the sweep grid into independent tasks.

    ``pool_for(fold, seed_index, real_train)`` returns the synthetic pool a
    fold draws from (the same pool for every fold unless adapters are refit
    per fold).
    """
    sc = cfg.sweep
    labels = real.labels()
    tasks: list[RunTask] = []
    for si, seed in enumerate(sc.seeds):
        plan = stratified_kfold(labels, sc.folds, derive_seed(cfg.seed, "folds", seed))
        for fold in range(sc.folds):
            test = real.subset(plan.test_indices[fold], note=f"test fold={fold} seed={seed}")
            train = real.subset(plan.train_indices(fold), note=f"train fold={fold} seed={seed}")
            pool = pool_for(fold, si, train)
            pool_ids = set(pool.ids)
            if test.count(origin=SYNTHETIC) or pool_ids.intersection(test.ids):
                raise AssertionError(f"synthetic sample in test split (fold={fold}, seed={seed})")
            perm_seed = derive_seed(cfg.seed, "assemble", fold, si)
            for ri, mode, ratio in conditions(sc.ratios, sc.include_synth_only):
                ctx = f"[ratio={ratio:g}, mode={mode}, fold={fold}, seed={seed}]"
                try:
                    assembled = assemble_training_set(train, pool, ratio, mode, perm_seed)
                except RareSynthError as e:
                    raise type(e)(f"{ctx} {e}") from e
                clf = dataclasses.replace(
                    cfg.classifier, seed=derive_seed(cfg.seed, "run", ri, MODES.index(mode), fold, si)
                )
                tasks.append(
                    RunTask(
                        key=(ri, MODES.index(mode), fold, si),
                        domain=cfg.data.domain,
                        mode=mode,
                        ratio=ratio,
                        fold=fold,
                        seed=seed,
                        train=assembled,
                        test=test,
                        clf=clf,
                        threshold=sc.threshold,
                    )
                )
    return tasks


def _run_with_context(task: RunTask) -> RunResult:
    try:
        return execute(task)
    except RareSynthError as e:
        raise type(e)(f"[ratio={task.ratio:g}, mode={task.mode}, fold={task.fold}, seed={task.seed}] {e}") from e


def run_tasks(tasks: list[RunTask], jobs: int = 1, progress: Callable[[int, int], None] | None = None) -> list[RunResult]:
    results: list[RunResult] = []
    if jobs <= 1:
        for i, task in enumerate(tasks):
            results.append(_run_with_context(task))
            if progress:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("spawn")) as ex:
            for i, res in enumerate(ex.map(_run_with_context, tasks)):
                results.append(res)
                if progress:
                    progress(i + 1, len(tasks))
    return sorted(results, key=lambda r: r.sort_key)


def aggregate(results: Iterable[RunResult]) -> list[dict]:
    """Mean and sample standard deviation per (mode, ratio) over folds x seeds."""
    groups: dict[tuple, list[RunResult]] = {}
    for r in sorted(results, key=lambda r: r.sort_key):
        groups.setdefault((r.domain, r.mode, r.ratio), []).append(r)
    rows = []
    for (domain, mode, ratio), rs in groups.items():
        row = {"domain": domain, "mode": mode, "ratio": ratio, "n_runs": len(rs)}
        for m in METRICS:
            vals = [getattr(r, m) for r in rs]
            row[f"{m}_mean"] = statistics.fmean(vals)
            row[f"{m}_std"] = statistics.stdev(vals) if len(vals) > 1 else math.nan
        rows.append(row)
    return rows


@dataclass
class SweepOutput:
    results: list[RunResult]
    aggregate: list[dict]


def run_sweep(
    cfg: PipelineConfig,
    real: Dataset,
    pool: Dataset | None = None,
    pool_for: PoolProvider | None = None,
    jobs: int = 1,
    progress: Callable[[int, int], None] | None = None,
) -> SweepOutput:
    """Run the full grid; provide either a fixed ``pool`` or a per-fold ``pool_for``."""
    if pool_for is None:
        if pool is None:
            raise InvalidArgument("run_sweep needs a synthetic pool or a pool provider")

        def pool_for(fold, si, train, _pool=pool):
            return _pool

    tasks = plan_runs(cfg, real, pool_for)
    log.info("sweep: %d runs", len(tasks))
    results = run_tasks(tasks, jobs=jobs, progress=progress)
    for r in results:
        if any(i.startswith("synth-") for i in r.test_ids):
            raise AssertionError("synthetic id leaked into a test split")
    return SweepOutput(results, aggregate(results))


# ---------------------------------------------------------------------------
# CSV


def results_csv(results: Iterable[RunResult], record_wall_time: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in results:
        w.writerow(r.csv_row(record_wall_time))
    return buf.getvalue()


def aggregate_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_COLUMNS)
    for row in rows:
        w.writerow([fmt(row[c]) if isinstance(row[c], float) else str(row[c]) for c in AGGREGATE_COLUMNS])
    return buf.getvalue()


def read_results_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("domain", "mode", "ratio", "f1", "pr_auc", "recall") if c not in (reader.fieldnames or [])]
        if missing:
            from .errors import FormatError

            raise FormatError(f"{path}: results CSV lacks columns {missing}")
        rows = []
        for row in reader:
            for k in ("ratio", "f1", "pr_auc", "recall", "precision"):
                if row.get(k) not in (None, ""):
                    row[k] = float(row[k])
            rows.append(row)
    return rows
