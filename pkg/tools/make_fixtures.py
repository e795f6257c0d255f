"""Regenerate the bundled Jobs-shaped and Twins-shaped fixture CSVs."""
import json
from pathlib import Path

from smrlnn import datagen

HERE = Path(__file__).resolve().parent.parent / "src" / "smrlnn" / "fixtures"


def main():
    HERE.mkdir(exist_ok=True)
    jobs = datagen.make_jobs_like(seed=0)
    datagen.write_csv(jobs, HERE / "jobs_like.csv", extra_columns=("rct",))
    twins = datagen.make_twins_like(seed=0)
    datagen.write_csv(twins, HERE / "twins_like.csv", extra_columns=("ycf",))
    schemas = {
        "jobs_like.schema.json": {"treatment": "z", "outcome": "yF", "prefix": "x", "rct": "rct", "binary": True},
        "twins_like.schema.json": {"treatment": "z", "outcome": "yF", "prefix": "x", "ycf": "ycf",
                                   "propensity": "e", "binary": True},
    }
    for name, body in schemas.items():
        (HERE / name).write_text(json.dumps(body, indent=1, sort_keys=True) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
