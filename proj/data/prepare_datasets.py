#!/usr/bin/env python3
"""Convert the raw public benchmark files into the CSV + schema layout read by relax.

Raw sources (all redistributed inside PyPI packages):
  sonar.dat   - UCI Connectionist Bench (Sonar), KEEL format, from the `keel-ds` wheel
  pima.dat    - Pima Indians Diabetes, KEEL format, from the `keel-ds` wheel
  biopsy.csv  - Wisconsin Breast Cancer (original, 699 rows), R MASS::biopsy, from `pydataset`
  Boston.csv  - Boston Housing, R MASS::Boston, from `pydataset`

Usage: prepare_datasets.py RAW_DIR OUT_DIR
"""
import csv
import json
import statistics
import sys
from pathlib import Path


def fmt(v):
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def write(out_dir, name, header, rows, target, kinds=None):
    kinds = kinds or {}
    with open(out_dir / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header + [target["name"]])
        for feats, label in rows:
            w.writerow([fmt(v) for v in feats] + [label])
    features = []
    for j, col in enumerate(header):
        vals = [float(r[0][j]) for r in rows]
        kind = kinds.get(col, "numeric")
        lo, hi = (0.0, 1.0) if kind == "binary" else (min(vals), max(vals))
        features.append({"name": col, "kind": kind, "actionable": True, "direction": "any",
                         "raw_min": lo, "raw_max": hi})
    with open(out_dir / f"{name}.schema.json", "w") as fh:
        json.dump({"features": features, "target": target}, fh, indent=2)
        fh.write("\n")


def keel_rows(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("@"):
            continue
        parts = [p.strip() for p in line.split(",")]
        rows.append((parts[:-1], parts[-1]))
    return rows


def main():
    raw, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)

    # Sonar: 60 band energies, rock (R) = 0, mine (M) = 1.
    rows = [(f, {"R": 0, "M": 1}[c]) for f, c in keel_rows(raw / "sonar.dat")]
    write(out, "sonar", [f"band{i:02d}" for i in range(60)], rows,
          {"name": "label", "task": "classification", "n_classes": 2, "classes": ["rock", "mine"]})

    # Diabetes (Pima): tested_negative = 0, tested_positive = 1.
    header = ["pregnancies", "glucose", "blood_pressure", "skin_thickness", "insulin", "bmi",
              "pedigree", "age"]
    rows = [(f, {"tested_negative": 0, "tested_positive": 1}[c]) for f, c in keel_rows(raw / "pima.dat")]
    write(out, "diabetes", header, rows,
          {"name": "outcome", "task": "classification", "n_classes": 2, "classes": ["negative", "positive"]})

    # Breast Cancer (Wisconsin original): drop the sample id, impute the 16 missing
    # bare-nuclei cells with the column median, benign = 0, malignant = 1.
    with open(raw / "biopsy.csv") as fh:
        recs = list(csv.DictReader(fh))
    cols = [f"V{i}" for i in range(1, 10)]
    names = ["clump_thickness", "cell_size", "cell_shape", "adhesion", "epithelial_size",
             "bare_nuclei", "chromatin", "nucleoli", "mitoses"]
    med = {c: statistics.median(float(r[c]) for r in recs if r[c] != "NA") for c in cols}
    rows = [([float(r[c]) if r[c] != "NA" else med[c] for c in cols],
             {"benign": 0, "malignant": 1}[r["class"]]) for r in recs]
    write(out, "breast_cancer", names, rows,
          {"name": "diagnosis", "task": "classification", "n_classes": 2, "classes": ["benign", "malignant"]})

    # Boston Housing: 13 features, median value (medv, $1000s) as regression target.
    with open(raw / "Boston.csv") as fh:
        recs = list(csv.DictReader(fh))
    header = ["crim", "zn", "indus", "chas", "nox", "rm", "age", "dis", "rad", "tax", "ptratio",
              "black", "lstat"]
    rows = [([float(r[c]) for c in header], r["medv"]) for r in recs]
    write(out, "boston", header, rows, {"name": "medv", "task": "regression"}, kinds={"chas": "binary"})


if __name__ == "__main__":
    main()
