#!/usr/bin/env python3
"""End-to-end desk-scale demo: corpus -> train -> decode -> evaluate.

Writes everything under ./demo_run (override with --out). Takes a few
minutes on a laptop CPU; shrink --steps for a quicker smoke run.
"""

import argparse
import sys
from pathlib import Path

from concaps.cli import main as concaps


def sh(*argv) -> None:
    code = concaps([str(a) for a in argv])
    if code != 0:
        sys.exit(code)


def run(out: Path, steps: int, seed: int) -> None:
    data = out / "data"
    sh("build-corpus", "--out-dir", data, "--docs", 60, "--images-per-doc", "3.0",
       "--seed", seed, "--split-fractions", "0.7,0.0,0.3")
    sh("stats", "--corpus", data / "corpus.jsonl", "--entities", data / "entities.tsv",
       "--out", out / "stats.json")
    sh("train", "--corpus", data / "corpus.jsonl", "--entities", data / "entities.tsv",
       "--features", data / "features", "--out-dir", out / "model",
       "--steps", steps, "--seed", seed, "--batch-size", 12,
       "--window-tokens", 64, "--peak-lr", "1e-3", "--log-every", 50)
    sh("generate", "--checkpoint", out / "model" / "checkpoint.pt",
       "--corpus", data / "corpus.jsonl", "--features", data / "features",
       "--out", out / "decoded.jsonl", "--split", "test", "--max-len", 14)
    sh("evaluate", "--decoded", out / "decoded.jsonl",
       "--corpus", data / "corpus.jsonl", "--entities", data / "entities.tsv",
       "--out", out / "report.json")
    print(f"\ndemo artifacts in {out}/")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("demo_run"))
    parser.add_argument("--steps", type=int, default=600)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    run(args.out, args.steps, args.seed)
