"""Command-line entry point: ``fairvic <verb> ...``."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from fairvic.data import DATA_DIR_ENV, load_builtin
from fairvic.errors import FairVICError
from fairvic.experiments import (
    EQUAL_GRID,
    TERM_MASKS,
    ExperimentSpec,
    ModelKind,
    Purpose,
    ResultCache,
    derive_seed,
    export_embeddings,
    ablation_equal,
    ablation_individual,
    permutation_importance,
    run_experiment,
    train_seed,
    write_table,
)
from fairvic.losses import LambdaWeights
from fairvic.metrics import EvalBundle, report


def _seeds(text: str) -> tuple[int, ...]:
    """``"10"`` means seeds 0..9; ``"3,5,8"`` lists them explicitly."""
    text = text.strip()
    if "," not in text and text.isdigit():
        return tuple(range(int(text)))
    return tuple(int(s) for s in text.split(",") if s.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(s) for s in text.split(",") if s.strip())


def _emit_error(exc: BaseException) -> None:
    record = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(record, sort_keys=True), err=True)


class _Group(click.Group):
    """Turns library errors into a JSON error record and exit status 1."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (FairVICError, ValueError, OSError) as exc:
            _emit_error(exc)
            ctx.exit(1)


def _common(fn):
    options = [
        click.option("--dataset", required=True, help="adult, compas or german"),
        click.option("--seeds", default="10", show_default=True,
                     help="seed count N (seeds 0..N-1) or a comma list"),
        click.option("--test-fraction", default=0.2, show_default=True, type=float),
        click.option("--gamma", default=1.0, show_default=True, type=float),
        click.option("--epochs", default=200, show_default=True, type=int),
        click.option("--data-dir", type=click.Path(file_okay=False), envvar=DATA_DIR_ENV,
                     help=f"dataset directory (env {DATA_DIR_ENV})"),
        click.option("--cache-dir", type=click.Path(file_okay=False),
                     help="reuse per-seed results stored here"),
        click.option("--jobs", default=1, show_default=True, type=int),
        click.option("--out", "out_dir", default="results", show_default=True,
                     type=click.Path(file_okay=False)),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


def _run_kwargs(data_dir, cache_dir, jobs) -> dict:
    return {
        "data_dir": data_dir,
        "cache": ResultCache(cache_dir) if cache_dir else None,
        "jobs": jobs,
    }


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True, help="log progress to stderr")
def main(verbose: bool) -> None:
    """Fairness-regularised training and evaluation on tabular data."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_common
@click.option("--model", type=click.Choice([m.value for m in ModelKind]),
              default=ModelKind.FAIRVIC.value, show_default=True)
@click.option("--lambdas", help="acc,var,inv,cov (default: per-dataset choice)")
@click.option("--counterfactual", is_flag=True, help="also evaluate with the attribute flipped")
def run(dataset, seeds, test_fraction, gamma, epochs, data_dir, cache_dir, jobs, out_dir,
        model, lambdas, counterfactual):
    """Train and evaluate one model over several seeds."""
    spec = ExperimentSpec(
        dataset=dataset,
        model=ModelKind(model),
        lambdas=LambdaWeights.parse(lambdas) if lambdas else None,
        gamma=gamma,
        seeds=_seeds(seeds),
        test_fraction=test_fraction,
        epochs=epochs,
        counterfactual=counterfactual,
        out_dir=out_dir,
    )
    rep = run_experiment(spec, **_run_kwargs(data_dir, cache_dir, jobs))
    for name, s in rep.summary.items():
        click.echo(f"{name:20s} {s.cell()}")
    cf = rep.counterfactual
    if cf is not None:
        click.echo(f"{'counterfactual AD':20s} {cf.mean_abs_diff:.4f}")


@main.command("ablate-equal")
@_common
@click.option("--grid", default=",".join(map(str, EQUAL_GRID)), show_default=True,
              help="lambda_acc values")
def ablate_equal(dataset, seeds, test_fraction, gamma, epochs, data_dir, cache_dir, jobs,
                 out_dir, grid):
    """Sweep lambda_acc with the three fairness terms weighted equally."""
    base = ExperimentSpec(dataset, seeds=_seeds(seeds), test_fraction=test_fraction,
                          gamma=gamma, epochs=epochs)
    rows = ablation_equal(dataset, _floats(grid), base, **_run_kwargs(data_dir, cache_dir, jobs))
    table = [(f"acc={acc:g}", rep) for acc, rep in rows]
    write_table(table, out_dir, f"{dataset}_ablate_equal", title=dataset)
    for name, rep in table:
        click.echo(f"{name:10s} accuracy {rep.summary['accuracy'].cell()}  "
                   f"DI {rep.summary['disparate_impact'].cell()}")


@main.command("ablate-individual")
@_common
def ablate_individual(dataset, seeds, test_fraction, gamma, epochs, data_dir, cache_dir, jobs,
                      out_dir):
    """Run FairVIC with only one or two of its terms switched on."""
    base = ExperimentSpec(dataset, seeds=_seeds(seeds), test_fraction=test_fraction,
                          gamma=gamma, epochs=epochs)
    rows = ablation_individual(dataset, TERM_MASKS, base, **_run_kwargs(data_dir, cache_dir, jobs))
    table = [("+".join(mask), rep) for mask, rep in rows]
    write_table(table, out_dir, f"{dataset}_ablate_individual", title=dataset)
    for name, rep in table:
        click.echo(f"{name:10s} SPD {rep.summary['statistical_parity'].cell()}")


@main.command()
@_common
@click.option("--model", type=click.Choice([m.value for m in ModelKind]),
              default=ModelKind.FAIRVIC.value, show_default=True)
@click.option("--lambdas", help="acc,var,inv,cov (default: per-dataset choice)")
@click.option("--repeats", default=5, show_default=True, type=int)
def importance(dataset, seeds, test_fraction, gamma, epochs, data_dir, cache_dir, jobs,
               out_dir, model, lambdas, repeats):
    """Permutation feature importance averaged over seeds."""
    spec = ExperimentSpec(dataset, ModelKind(model),
                          LambdaWeights.parse(lambdas) if lambdas else None,
                          gamma=gamma, seeds=_seeds(seeds), test_fraction=test_fraction,
                          epochs=epochs)
    data = load_builtin(dataset, data_dir)
    scores = []
    for seed in spec.seeds:
        net, _, test = train_seed(spec, data, seed)
        scores.append(permutation_importance(net, test, repeats,
                                             derive_seed(seed, Purpose.IMPORTANCE)))
    scores = np.array(scores)
    frame = pd.DataFrame({
        "feature": data.feature_names,
        "importance_mean": scores.mean(axis=0),
        "importance_std": scores.std(axis=0),
    })
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{dataset}_{spec.label}_importance.csv"
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    click.echo(frame.to_string(index=False))


@main.command()
@_common
@click.option("--model", type=click.Choice([m.value for m in ModelKind]),
              default=ModelKind.FAIRVIC.value, show_default=True)
@click.option("--lambdas", help="acc,var,inv,cov (default: per-dataset choice)")
@click.option("--split", type=click.Choice(["test", "train"]), default="test", show_default=True)
def embeddings(dataset, seeds, test_fraction, gamma, epochs, data_dir, cache_dir, jobs,
               out_dir, model, lambdas, split):
    """Export 2-D bottleneck coordinates for the first seed."""
    spec = ExperimentSpec(dataset, ModelKind(model),
                          LambdaWeights.parse(lambdas) if lambdas else None,
                          gamma=gamma, seeds=_seeds(seeds)[:1], test_fraction=test_fraction,
                          epochs=epochs)
    net, train_data, test_data = train_seed(spec, load_builtin(dataset, data_dir), spec.seeds[0])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = export_embeddings(net, test_data if split == "test" else train_data,
                             out / f"{dataset}_{spec.label}_seed{spec.seeds[0]}_embeddings.csv")
    click.echo(str(path))


@main.command()
@click.argument("predictions", type=click.Path(exists=True, dir_okay=False))
@click.option("--prob-col", default="prob", show_default=True)
@click.option("--label-col", default="label", show_default=True)
@click.option("--group-col", default="group", show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="write the JSON report here")
def audit(predictions, prob_col, label_col, group_col, out_path):
    """Fairness metrics for an external CSV of probabilities, labels and 0/1 groups."""
    frame = pd.read_csv(predictions)
    missing = [c for c in (prob_col, label_col, group_col) if c not in frame.columns]
    if missing:
        raise ValueError(f"{predictions}: missing columns {missing}")
    for col in (label_col, group_col):
        bad = ~frame[col].isin([0, 1])
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise ValueError(f"{predictions}: row {row}, column {col!r}: expected 0 or 1")
    rep = report(EvalBundle.from_probs(frame[prob_col].to_numpy(np.float64),
                                       frame[label_col].to_numpy(), frame[group_col].to_numpy()))
    text = json.dumps(rep.as_record(), indent=2, sort_keys=True)
    if out_path:
        Path(out_path).write_text(text + "\n")
    click.echo(text)


if __name__ == "__main__":
    sys.exit(main())
