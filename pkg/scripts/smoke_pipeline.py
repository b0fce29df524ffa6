#!/usr/bin/env python3
"""Simple end-to-end smoke run of simulate, cluster, evaluate and forecast in a temp dir."""

import json
import os
import tempfile

from htscluster.cli import main as cli


SIM = [
    "--offsets", "0", "20",
    "--instances-per-cluster", "3",
    "--length-range", "12", "16",
    "--branching", "2",
    "--noise-std", "0.3",
]


def run(*argv: str) -> None:
    code = cli(list(argv))
    if code != 0:
        raise SystemExit(f"{argv[0]} failed with exit code {code}")


def read_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def main():
    with tempfile.TemporaryDirectory() as root:
        sim, fit, ev, fc = (os.path.join(root, d) for d in ("sim", "fit", "eval", "forecast"))
        dataset = os.path.join(sim, "dataset.json")

        run("simulate", *SIM, "--seed", "1", "--output-dir", sim, "-q")
        run("cluster", "--input", dataset, "--k-per-level", "2", "--seed", "1", "--output-dir", fit, "-q")
        run("evaluate", "--input", dataset, "--labels", os.path.join(sim, "labels.json"),
            "--model", os.path.join(fit, "model.json"), "--output-dir", ev, "-q")
        run("forecast", "--input", dataset, "--k-per-level", "2", "--horizon", "3",
            "--baseline", "per-series", "--seed", "1", "--output-dir", fc, "-q")

        metrics = read_json(os.path.join(ev, "metrics.json"))
        timing = read_json(os.path.join(fc, "timing.json"))
        baseline = read_json(os.path.join(fc, "timing_per_series.json"))
        if timing["fits"] > baseline["fits"]:
            raise SystemExit(f"clustered fits {timing['fits']} > per-series fits {baseline['fits']}")

    print(json.dumps({"metrics": metrics, "fits": timing["fits"], "fits_per_series": baseline["fits"]},
                     indent=2, sort_keys=True))
    print("pipeline smoke test passed")


if __name__ == "__main__":
    main()
