#!/usr/bin/env python3
"""Regenerate the bundled fixture CSVs (deterministic; safe to re-run).

Two small tabular datasets with a known causal texture:

* law_fixture.csv: regression. A categorical background feature (race) that
  the sensitive attribute cannot reach, two continuous outcomes of it
  (lsat, gpa), a binary sensitive attribute (sex), and a continuous label.
* adult_fixture.csv: classification. Binary/categorical columns split into
  a sensitive-independent group and a sensitive-dependent group, with a
  binary income label.
"""

from __future__ import annotations

import csv
import pathlib

import numpy as np

HERE = pathlib.Path(__file__).resolve().parent
FIXTURES = HERE.parent / "fixtures"
N = 500


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def make_law(rng: np.random.Generator) -> list[dict]:
    sex = rng.binomial(1, 0.5, N)
    race = rng.choice(3, size=N, p=(0.5, 0.3, 0.2))
    aptitude = rng.standard_normal(N)
    lsat = (0.3 * sex + 0.55 * aptitude + 0.25 * (race == 1) - 0.15 * (race == 2)
            + 0.3 * rng.standard_normal(N))
    gpa = -0.2 * sex + 0.6 * aptitude + 0.25 * rng.standard_normal(N)
    fya = 0.45 * lsat + 0.4 * gpa - 0.3 * sex + 0.2 * rng.standard_normal(N)
    rows = []
    for i in range(N):
        rows.append({
            "race": f"r{race[i]}",
            "lsat": f"{lsat[i]:.6f}",
            "gpa": f"{gpa[i]:.6f}",
            "sex": str(sex[i]),
            "fya": f"{fya[i]:.6f}",
        })
    return rows


def make_adult(rng: np.random.Generator) -> list[dict]:
    sex = rng.binomial(1, 0.5, N)
    age_band = rng.choice(3, size=N, p=(0.35, 0.4, 0.25))
    race_group = rng.binomial(1, 0.3, N)
    native = rng.binomial(1, 0.15, N)
    skill = rng.standard_normal(N)

    edu_score = 0.8 * skill + 0.5 * sex + rng.standard_normal(N) * 0.6
    education = np.digitize(edu_score, [-0.4, 0.8])  # 0, 1, 2
    occ_score = 0.7 * skill + 0.6 * sex + rng.standard_normal(N) * 0.6
    occupation = np.digitize(occ_score, [-0.3, 0.9])
    hours = rng.binomial(1, sigmoid(0.9 * sex - 0.2 + 0.3 * skill))
    married = rng.binomial(1, sigmoid(0.4 * sex + 0.1))

    z = (-1.4 + 0.9 * (education == 2) + 0.5 * (education == 1)
         + 0.7 * (occupation == 2) + 0.8 * hours + 0.6 * sex
         + 0.3 * (age_band == 1) + 0.5 * skill)
    income = rng.binomial(1, sigmoid(z))
    rows = []
    for i in range(N):
        rows.append({
            "age_band": f"a{age_band[i]}",
            "race_group": str(race_group[i]),
            "native_region": str(native[i]),
            "education": f"e{education[i]}",
            "occupation": f"o{occupation[i]}",
            "hours_band": str(hours[i]),
            "married": str(married[i]),
            "sex": str(sex[i]),
            "income": str(income[i]),
        })
    return rows


def write(path: pathlib.Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {path}")


def main() -> None:
    FIXTURES.mkdir(exist_ok=True)
    write(FIXTURES / "law_fixture.csv", make_law(np.random.default_rng(7)))
    write(FIXTURES / "adult_fixture.csv", make_adult(np.random.default_rng(11)))


if __name__ == "__main__":
    main()
