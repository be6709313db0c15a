"""Null control: pooled ERM against every DRO variant when P(Y|X) is shared by all groups.

    python scripts/null_control.py --seeds 5
"""

import argparse
import json

from subpopdro.controls import medians, null_control


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    results = null_control(range(args.seeds))
    med = medians(results)
    erm = med["erm"]["worst_group_loss"]
    for name, row in med.items():
        print(f"{name:18s} median worst-group loss {row['worst_group_loss']:.4f}  gap {row['worst_group_loss'] - erm:+.4f}")
    print(json.dumps(med, indent=2))


if __name__ == "__main__":
    main()
