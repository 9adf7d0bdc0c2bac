"""Convert the raw UCI / ProPublica files into the header CSVs under data/.

The raw files are the ones distributed by UCI (adult.data, adult.test,
german.data) and ProPublica (compas-scores-two-years.csv). The ``responsibly``
wheel on PyPI bundles all four, so::

    pip download --no-deps responsibly
    unzip responsibly-*.whl 'responsibly/dataset/*'
    python scripts/prepare_datasets.py responsibly/dataset data

Output files keep raw category strings; all encoding happens in
``fairvic.data`` according to the dataset schema.
"""
import argparse
from pathlib import Path

import pandas as pd

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num",
    "marital-status", "occupation", "relationship", "race", "sex",
    "capital-gain", "capital-loss", "hours-per-week", "native-country",
    "income",
]

GERMAN_COLUMNS = [
    "status", "duration", "credit_history", "purpose", "credit_amount",
    "savings", "employment", "installment_rate", "personal_status_sex",
    "other_debtors", "residence_since", "property", "age",
    "other_installment_plans", "housing", "existing_credits", "job",
    "people_liable", "telephone", "foreign_worker", "credit",
]

COMPAS_COLUMNS = [
    "sex", "age", "race", "juv_fel_count", "juv_misd_count",
    "juv_other_count", "priors_count", "c_charge_degree", "two_year_recid",
]


def prepare_adult(src: Path) -> pd.DataFrame:
    frames = []
    for name, skip in (("adult.data", 0), ("adult.test", 1)):
        df = pd.read_csv(src / "adult" / name, header=None, names=ADULT_COLUMNS,
                         skiprows=skip, skipinitialspace=True, dtype=str)
        frames.append(df)
    df = pd.concat(frames, ignore_index=True)
    df = df.dropna(how="all")
    # adult.test labels carry a trailing period
    df["income"] = df["income"].str.rstrip(".")
    return df.replace("?", "")


def prepare_german(src: Path) -> pd.DataFrame:
    df = pd.read_csv(src / "german" / "german.data", sep=r"\s+", header=None,
                     names=GERMAN_COLUMNS, dtype=str)
    df["credit"] = df["credit"].map({"1": "good", "2": "bad"})
    return df


def prepare_compas(src: Path) -> pd.DataFrame:
    # ProPublica's two-year filter; the race subset is left to the schema
    df = pd.read_csv(src / "compas" / "compas-scores-two-years.csv")
    df = df[(df["days_b_screening_arrest"] <= 30)
            & (df["days_b_screening_arrest"] >= -30)
            & (df["is_recid"] != -1)
            & (df["c_charge_degree"] != "O")
            & (df["score_text"] != "N/A")]
    return df[COMPAS_COLUMNS]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("source", type=Path, help="directory holding adult/, compas/, german/")
    parser.add_argument("dest", type=Path)
    args = parser.parse_args()
    args.dest.mkdir(parents=True, exist_ok=True)
    for name, fn in (("adult", prepare_adult), ("compas", prepare_compas),
                     ("german", prepare_german)):
        df = fn(args.source)
        df.to_csv(args.dest / f"{name}.csv", index=False)
        print(f"{name}: {len(df)} rows -> {args.dest / (name + '.csv')}")


if __name__ == "__main__":
    main()
