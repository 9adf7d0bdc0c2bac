"""Seeded multi-run experiments, ablation grids and model inspection exports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from fairvic.data import Dataset, load_builtin, standardize, train_test_split
from fairvic.errors import InvalidArgumentError, UndefinedMetricError
from fairvic.losses import BASELINE_WEIGHTS, LambdaWeights, VarianceConfig
from fairvic.metrics import (
    METRIC_NAMES,
    MetricReport,
    accuracy_f1,
    counterfactual_report,
    evaluate,
    EvalBundle,
    predict_proba,
)
from fairvic.nn import Mode, Network, forward, init_network
from fairvic.train import TrainConfig, train

log = logging.getLogger(__name__)

HIDDEN_WIDTHS = (128, 64, 32, 2, 32, 64, 128)
DEFAULT_SEEDS = tuple(range(10))
DEFAULT_LAMBDAS = {
    "adult": LambdaWeights(0.2, 0.1, 0.1, 0.6),
    "compas": LambdaWeights(0.1, 0.1, 0.1, 0.7),
    "german": LambdaWeights(0.1, 0.1, 0.1, 0.7),
}
FALLBACK_LAMBDAS = LambdaWeights(0.1, 0.1, 0.1, 0.7)
EQUAL_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)
TERM_MASKS = (
    ("var",), ("inv",), ("cov",),
    ("var", "inv"), ("var", "cov"), ("inv", "cov"),
)
METRIC_LABELS = {
    "accuracy": "Accuracy",
    "f1": "F1",
    "equalized_odds": "Equalized Odds",
    "absolute_odds": "Abs. Odds",
    "statistical_parity": "Stat. Parity",
    "disparate_impact": "Disparate Impact",
}
# bump when anything that changes per-seed results changes
RESULT_FORMAT = 1


class ModelKind(str, Enum):
    BASELINE = "baseline_bce"
    FAIRVIC = "fairvic"


class Purpose(int, Enum):
    SPLIT = 1
    INIT = 2
    TRAIN = 3
    IMPORTANCE = 4


def derive_seed(seed: int, purpose: Purpose) -> int:
    """Independent 32-bit seed for one subsystem of one run."""
    return int(np.random.SeedSequence([int(seed), int(purpose)]).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: str
    model: ModelKind = ModelKind.FAIRVIC
    lambdas: LambdaWeights | None = None
    gamma: float = 1.0
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    test_fraction: float = 0.2
    out_dir: str | None = None
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = TrainConfig.learning_rate
    counterfactual: bool = False
    counterfactual_groups: str = "original"

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "model", ModelKind(self.model))
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise InvalidArgumentError("at least one seed is required")
        if len(set(seeds)) != len(seeds):
            raise InvalidArgumentError(f"seeds must be distinct, got {seeds}")
        set_(self, "seeds", seeds)
        if self.model is ModelKind.BASELINE:
            if self.lambdas is not None and self.lambdas != BASELINE_WEIGHTS:
                raise InvalidArgumentError("baseline_bce always uses lambdas (1, 0, 0, 0)")
            set_(self, "lambdas", BASELINE_WEIGHTS)
        elif self.lambdas is None:
            set_(self, "lambdas", DEFAULT_LAMBDAS.get(self.dataset, FALLBACK_LAMBDAS))
        elif not isinstance(self.lambdas, LambdaWeights):
            set_(self, "lambdas", LambdaWeights(*self.lambdas))
        if not 0.0 < self.test_fraction < 1.0:
            raise InvalidArgumentError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.counterfactual_groups not in ("original", "flipped"):
            raise InvalidArgumentError(
                f"counterfactual_groups must be 'original' or 'flipped', got {self.counterfactual_groups!r}"
            )
        # validates gamma and the training settings early
        self.train_config(self.seeds[0])

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=derive_seed(seed, Purpose.TRAIN),
            lambdas=self.lambdas,
            variance_cfg=VarianceConfig(gamma=self.gamma),
        )

    @property
    def label(self) -> str:
        if self.model is ModelKind.BASELINE:
            return "baseline"
        return "fairvic_" + "_".join(f"{w:g}" for w in self.lambdas.as_tuple())

    def as_record(self) -> dict:
        """Everything that determines the per-seed results (no output paths)."""
        return {
            "dataset": self.dataset,
            "model": self.model.value,
            "lambdas": list(self.lambdas.as_tuple()),
            "gamma": self.gamma,
            "seeds": list(self.seeds),
            "test_fraction": self.test_fraction,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "counterfactual": self.counterfactual,
            "counterfactual_groups": self.counterfactual_groups,
        }


@dataclass(frozen=True)
class MetricSummary:
    mean: float | None
    std: float | None
    n: int
    n_undefined: int

    def cell(self) -> str:
        if self.mean is None:
            return "undefined"
        text = f"{self.mean:.4f} ± {self.std:.4f}"
        return text + (f" ({self.n_undefined} undef.)" if self.n_undefined else "")


def summarize(reports: Sequence[MetricReport]) -> dict[str, MetricSummary]:
    """Per-metric mean and population std, skipping undefined seeds."""
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports]
        defined = np.array([v for v in vals if v is not None], dtype=np.float64)
        n_undef = len(vals) - defined.size
        if n_undef:
            log.warning("%s undefined for %d of %d seeds", name, n_undef, len(vals))
        if defined.size == 0:
            out[name] = MetricSummary(None, None, 0, n_undef)
        else:
            out[name] = MetricSummary(float(defined.mean()), float(defined.std()), int(defined.size), n_undef)
    return out


@dataclass(frozen=True)
class SeedResult:
    seed: int
    regular: MetricReport
    counterfactual: MetricReport | None = None
    abs_diff: MetricReport | None = None
    # wall-clock training time; kept out of reports so outputs stay reproducible
    elapsed: float | None = field(default=None, compare=False)

    def as_record(self) -> dict:
        rec = {"seed": self.seed, "regular": self.regular.as_record()}
        if self.counterfactual is not None:
            rec["counterfactual"] = self.counterfactual.as_record()
            rec["abs_diff"] = self.abs_diff.as_record()
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "SeedResult":
        cf = rec.get("counterfactual")
        return cls(
            seed=int(rec["seed"]),
            regular=MetricReport.from_record(rec["regular"]),
            counterfactual=MetricReport.from_record(cf) if cf is not None else None,
            abs_diff=MetricReport.from_record(rec["abs_diff"]) if cf is not None else None,
        )


@dataclass(frozen=True)
class CounterfactualSummary:
    regular: dict[str, MetricSummary]
    counterfactual: dict[str, MetricSummary]
    # |mean regular - mean counterfactual| per metric
    abs_diff: dict[str, float | None]

    @property
    def mean_abs_diff(self) -> float:
        """Average over the six metrics of the per-metric absolute difference."""
        missing = [k for k, v in self.abs_diff.items() if v is None]
        if missing:
            raise UndefinedMetricError("mean_abs_diff", f"undefined: {', '.join(missing)}")
        return sum(self.abs_diff.values()) / len(self.abs_diff)


@dataclass(frozen=True)
class AggregateReport:
    spec: ExperimentSpec
    per_seed: tuple[SeedResult, ...]
    summary: dict[str, MetricSummary] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "summary", summarize([r.regular for r in self.per_seed]))

    @property
    def elapsed(self) -> float | None:
        """Summed training time over seeds, when known for all of them."""
        times = [r.elapsed for r in self.per_seed]
        return None if any(t is None for t in times) else float(sum(times))

    def mean(self, metric: str) -> float | None:
        return self.summary[metric].mean

    def std(self, metric: str) -> float | None:
        return self.summary[metric].std

    @property
    def counterfactual(self) -> CounterfactualSummary | None:
        if any(r.counterfactual is None for r in self.per_seed):
            return None
        reg = self.summary
        cf = summarize([r.counterfactual for r in self.per_seed])
        diff = {
            k: None if reg[k].mean is None or cf[k].mean is None else abs(reg[k].mean - cf[k].mean)
            for k in METRIC_NAMES
        }
        return CounterfactualSummary(reg, cf, diff)

    def as_record(self) -> dict:
        rec = {
            "spec": self.spec.as_record(),
            "summary": {k: asdict(v) for k, v in self.summary.items()},
            "per_seed": [r.as_record() for r in self.per_seed],
        }
        cf = self.counterfactual
        if cf is not None:
            rec["counterfactual"] = {
                "summary": {k: asdict(v) for k, v in cf.counterfactual.items()},
                "abs_diff": cf.abs_diff,
                "mean_abs_diff": _maybe(lambda: cf.mean_abs_diff),
            }
        return rec


def _maybe(fn: Callable[[], float]) -> float | None:
    try:
        return fn()
    except UndefinedMetricError:
        return None


# -- running -----------------------------------------------------------------

def network_widths(n_features: int) -> list[int]:
    return [n_features, *HIDDEN_WIDTHS, 1]


def prepare_split(data: Dataset, seed: int, test_fraction: float) -> tuple[Dataset, Dataset]:
    """Seeded split followed by standardization fitted on the training part."""
    train_raw, test_raw = train_test_split(data, test_fraction, derive_seed(seed, Purpose.SPLIT))
    train_std, (test_std,) = standardize(train_raw, [test_raw])
    return train_std, test_std


def train_seed(spec: ExperimentSpec, data: Dataset, seed: int) -> tuple[Network, Dataset, Dataset]:
    """Split, standardize, initialise and train the model for one seed."""
    train_data, test_data = prepare_split(data, seed, spec.test_fraction)
    net = init_network(network_widths(data.n_features), derive_seed(seed, Purpose.INIT))
    model, _ = train(net, train_data, spec.train_config(seed))
    return model, train_data, test_data


def run_seed(spec: ExperimentSpec, data: Dataset, seed: int) -> SeedResult:
    start = time.perf_counter()
    model, _, test_data = train_seed(spec, data, seed)
    if spec.counterfactual:
        regular, cf, diff = counterfactual_report(model, test_data, spec.counterfactual_groups)
        return SeedResult(seed, regular, cf, diff, elapsed=time.perf_counter() - start)
    return SeedResult(seed, evaluate(model, test_data), elapsed=time.perf_counter() - start)


def spec_key(spec: ExperimentSpec) -> str:
    blob = json.dumps({"format": RESULT_FORMAT, **spec.as_record()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ResultCache:
    """Per-seed results on disk, keyed by everything that determines them."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, spec: ExperimentSpec, seed: int) -> Path:
        single = replace(spec, seeds=(seed,), out_dir=None)
        return self.root / spec.dataset / f"{spec_key(single)}.json"

    def get(self, spec: ExperimentSpec, seed: int) -> SeedResult | None:
        path = self._path(spec, seed)
        if not path.exists():
            return None
        rec = json.loads(path.read_text())
        return replace(SeedResult.from_record(rec["result"]), elapsed=rec.get("elapsed"))

    def put(self, spec: ExperimentSpec, result: SeedResult) -> None:
        path = self._path(spec, result.seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"result": result.as_record(), "elapsed": result.elapsed},
                                  sort_keys=True))
        tmp.replace(path)


def _run_seed_job(args: tuple[ExperimentSpec, str | None, int]) -> SeedResult:
    spec, data_dir, seed = args
    return run_seed(spec, load_builtin(spec.dataset, data_dir), seed)


def run_experiment(
    spec: ExperimentSpec,
    *,
    data: Dataset | None = None,
    data_dir: str | Path | None = None,
    cache: ResultCache | None = None,
    jobs: int = 1,
) -> AggregateReport:
    """Train and evaluate one model per seed and aggregate the test metrics.

    Results are joined in seed order, so the report does not depend on
    ``jobs``. With ``spec.out_dir`` set the report is also written there.
    """
    results: dict[int, SeedResult] = {}
    todo = []
    for seed in spec.seeds:
        hit = cache.get(spec, seed) if cache is not None else None
        if hit is not None:
            results[seed] = hit
        else:
            todo.append(seed)
    if todo:
        if jobs > 1 and data is None and len(todo) > 1:
            args = [(spec, None if data_dir is None else str(data_dir), s) for s in todo]
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                fresh = list(pool.map(_run_seed_job, args))
            if cache is not None:
                for res in fresh:
                    cache.put(spec, res)
        else:
            if data is None:
                data = load_builtin(spec.dataset, data_dir)
            fresh = []
            for seed in todo:
                log.info("%s %s seed %d", spec.dataset, spec.label, seed)
                fresh.append(run_seed(spec, data, seed))
                if cache is not None:
                    cache.put(spec, fresh[-1])
        for res in fresh:
            results[res.seed] = res
    report = AggregateReport(spec, tuple(results[s] for s in spec.seeds))
    if spec.out_dir is not None:
        write_report(report, spec.out_dir)
    return report


# -- ablations ---------------------------------------------------------------

def equal_split_weights(acc: float) -> LambdaWeights:
    if not 0.0 < acc < 1.0:
        raise InvalidArgumentError(f"lambda_acc must be in (0, 1), got {acc}")
    return LambdaWeights.equal_split(acc)


def mask_weights(mask: Sequence[str], acc: float = 0.1) -> LambdaWeights:
    """``acc`` on the accuracy term, the rest split evenly over the selected terms."""
    terms = tuple(mask)
    if not 1 <= len(terms) <= 2 or len(set(terms)) != len(terms):
        raise InvalidArgumentError(f"a term mask selects one or two distinct terms, got {terms}")
    unknown = set(terms) - {"var", "inv", "cov"}
    if unknown:
        raise InvalidArgumentError(f"unknown loss terms {sorted(unknown)}")
    share = (1.0 - acc) / len(terms)
    return LambdaWeights(acc, *(share if t in terms else 0.0 for t in ("var", "inv", "cov")))


def ablation_equal(
    dataset: str,
    grid: Sequence[float] = EQUAL_GRID,
    base: ExperimentSpec | None = None,
    **run_kwargs,
) -> list[tuple[float, AggregateReport]]:
    """One FairVIC run per lambda_acc, remaining weight shared equally by the three terms."""
    weights = [equal_split_weights(a) for a in grid]
    base = base or ExperimentSpec(dataset)
    rows = []
    for acc, lam in zip(grid, weights):
        spec = replace(base, dataset=dataset, model=ModelKind.FAIRVIC, lambdas=lam, out_dir=None)
        rows.append((acc, run_experiment(spec, **run_kwargs)))
    return rows


def ablation_individual(
    dataset: str,
    masks: Sequence[Sequence[str]] = TERM_MASKS,
    base: ExperimentSpec | None = None,
    **run_kwargs,
) -> list[tuple[tuple[str, ...], AggregateReport]]:
    """One FairVIC run per term mask with lambda_acc fixed at 0.1."""
    weights = [mask_weights(m) for m in masks]
    base = base or ExperimentSpec(dataset)
    rows = []
    for mask, lam in zip(masks, weights):
        spec = replace(base, dataset=dataset, model=ModelKind.FAIRVIC, lambdas=lam, out_dir=None)
        rows.append((tuple(mask), run_experiment(spec, **run_kwargs)))
    return rows


# -- inspection --------------------------------------------------------------

def permutation_importance(
    model: Network,
    test: Dataset,
    repeats: int = 5,
    seed: int = 0,
) -> np.ndarray:
    """Mean accuracy drop when each feature column is shuffled, one score per feature."""
    if repeats < 1:
        raise InvalidArgumentError(f"repeats must be >= 1, got {repeats}")
    rng = np.random.default_rng(seed)
    x = np.array(test.features, dtype=np.float64)

    def acc(features: np.ndarray) -> float:
        bundle = EvalBundle.from_probs(predict_proba(model, features), test.labels, test.protected)
        return accuracy_f1(bundle)[0]

    base = acc(x)
    scores = np.zeros(test.n_features)
    for j in range(test.n_features):
        original = x[:, j].copy()
        drops = []
        for _ in range(repeats):
            x[:, j] = rng.permutation(original)
            drops.append(base - acc(x))
        x[:, j] = original
        scores[j] = float(np.mean(drops))
    return scores


def embedding_table(model: Network, data: Dataset) -> str:
    """CSV text with the bottleneck coordinates, label and group of every row."""
    _, z, _ = forward(model, data.features, Mode.EVAL)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i}" for i in range(z.shape[1])] + ["label", "group"])
    for coords, label, group in zip(z, data.labels, data.protected):
        w.writerow([repr(float(c)) for c in coords] + [int(label), int(group)])
    return buf.getvalue()


def export_embeddings(model: Network, data: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(embedding_table(model, data))
    return path


# -- output ------------------------------------------------------------------

def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def seeds_csv(report: AggregateReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "evaluation", *METRIC_NAMES])
    for res in report.per_seed:
        w.writerow([res.seed, "regular", *(_fmt(getattr(res.regular, k)) for k in METRIC_NAMES)])
        if res.counterfactual is not None:
            w.writerow([res.seed, "counterfactual",
                        *(_fmt(getattr(res.counterfactual, k)) for k in METRIC_NAMES)])
    return buf.getvalue()


def summary_csv(rows: Sequence[tuple[str, AggregateReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["model"]
    for k in METRIC_NAMES:
        header += [f"{k}_mean", f"{k}_std", f"{k}_undefined"]
    w.writerow(header)
    for name, rep in rows:
        line = [name]
        for k in METRIC_NAMES:
            s = rep.summary[k]
            line += [_fmt(s.mean), _fmt(s.std), s.n_undefined]
        w.writerow(line)
    return buf.getvalue()


def markdown_table(rows: Sequence[tuple[str, AggregateReport]], title: str | None = None) -> str:
    lines = []
    if title:
        lines += [f"### {title}", ""]
    lines.append("| Model | " + " | ".join(METRIC_LABELS[k] for k in METRIC_NAMES) + " |")
    lines.append("|---" * (len(METRIC_NAMES) + 1) + "|")
    for name, rep in rows:
        lines.append(f"| {name} | " + " | ".join(rep.summary[k].cell() for k in METRIC_NAMES) + " |")
        cf = rep.counterfactual
        if cf is not None:
            lines.append(f"| {name} CF | "
                         + " | ".join(cf.counterfactual[k].cell() for k in METRIC_NAMES) + " |")
            lines.append(f"| {name} AD | "
                         + " | ".join("undefined" if cf.abs_diff[k] is None else f"{cf.abs_diff[k]:.4f}"
                                      for k in METRIC_NAMES) + " |")
    return "\n".join(lines) + "\n"


def write_report(report: AggregateReport, out_dir: str | Path, stem: str | None = None) -> list[Path]:
    """Write ``<stem>.json``, ``<stem>_seeds.csv``, ``<stem>_summary.csv`` and ``<stem>.md``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{report.spec.dataset}_{report.spec.label}"
    rows = [(report.spec.label, report)]
    files = {
        f"{stem}.json": json.dumps(report.as_record(), indent=2, sort_keys=True) + "\n",
        f"{stem}_seeds.csv": seeds_csv(report),
        f"{stem}_summary.csv": summary_csv(rows),
        f"{stem}.md": markdown_table(rows, title=report.spec.dataset),
    }
    paths = []
    for name, text in files.items():
        path = out / name
        path.write_text(text, encoding="utf-8")
        paths.append(path)
    return paths


def write_table(rows: Sequence[tuple[str, AggregateReport]], out_dir: str | Path, stem: str,
                title: str | None = None) -> list[Path]:
    """Summary CSV, markdown and JSON for several reports (e.g. an ablation grid)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {name: rep.as_record() for name, rep in rows}
    files = {
        f"{stem}.json": json.dumps(payload, indent=2, sort_keys=True) + "\n",
        f"{stem}_summary.csv": summary_csv(rows),
        f"{stem}.md": markdown_table(rows, title=title),
    }
    paths = []
    for name, text in files.items():
        path = out / name
        path.write_text(text, encoding="utf-8")
        paths.append(path)
    return paths
