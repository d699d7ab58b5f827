#!/usr/bin/env python3
"""Export the three bundled UCI datasets to the repository's on-disk format.

Each dataset lands in data/<name>/ as two files:

  features.csv  one row per node, one header line, full-precision floats
  labels.csv    one integer class id per line, aligned with features.csv

Feature values are written exactly as scikit-learn ships them (no scaling);
column standardization is part of the loading pipeline, not the fixtures.
Running this script twice produces byte-identical files.
"""

from pathlib import Path

from sklearn.datasets import load_breast_cancer, load_digits, load_wine


def export(name: str, bundle, root: Path) -> None:
    out = root / name
    out.mkdir(parents=True, exist_ok=True)

    x = bundle.data
    y = bundle.target
    names = [str(c).strip().replace(" ", "_") for c in bundle.feature_names]
    assert x.shape[0] == y.shape[0] and x.shape[1] == len(names)

    with open(out / "features.csv", "w") as f:
        f.write(",".join(names) + "\n")
        for row in x:
            f.write(",".join(repr(float(v)) for v in row) + "\n")

    with open(out / "labels.csv", "w") as f:
        for v in y:
            f.write(f"{int(v)}\n")

    classes = len(set(int(v) for v in y))
    print(f"{name}: {x.shape[0]} nodes, {x.shape[1]} features, {classes} classes")


def main() -> None:
    root = Path(__file__).resolve().parent.parent / "data"
    export("wine", load_wine(), root)
    export("cancer", load_breast_cancer(), root)
    export("digits", load_digits(), root)


if __name__ == "__main__":
    main()
