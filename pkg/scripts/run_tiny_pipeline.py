"""Run the whole CLI pipeline on a config (default: configs/tiny.json).

    python scripts/run_tiny_pipeline.py [--config PATH] [--out DIR] [--jobs N]
"""

import argparse
import sys
from pathlib import Path

from subpopdro.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "tiny.json"))
    ap.add_argument("--out")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    common = ["--config", args.config] + (["--out", args.out] if args.out else [])
    steps = [
        ["run", *common, "--resume", "--jobs", str(args.jobs)],
        ["select", *common],
        ["evaluate", *common, "--jobs", str(args.jobs)],
        ["report", *common],
    ]
    for argv in steps:
        code = cli(argv)
        if code != 0:
            sys.exit(code)


if __name__ == "__main__":
    main()
