#!/usr/bin/env python3
"""Run the structure-term ablation ladder on a manifest and print the table.

Thin experiment driver over the CLI machinery: nearest neighbours, plain
transport, plus-smoothness-with-relaxed-marginal, plus-symmetry, each scored
at PCK@alpha with the manifest's default normalization.
"""

import argparse
import csv
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from gwmatch.cli import main as cli_main


def run(manifest: str, alpha: float, out: str | None) -> int:
    workdir = out or tempfile.mkdtemp(prefix="gwmatch-ablation-")
    code = cli_main(
        ["ablate", "--manifest", manifest, "--alpha", str(alpha), "--out", workdir]
    )
    if code != 0:
        return code
    rows = list(csv.DictReader((Path(workdir) / "ablation.csv").open()))
    print(f"\n{'variant':<8} {'PCK@' + format(alpha, 'g'):>10} {'keypoints':>10}")
    for row in rows:
        print(f"{row['group']:<8} {float(row['score']):>10.4f} {row['n_keypoints']:>10}")
    print(f"\nper-rung predictions and ablation.csv under {workdir}")
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--manifest", default="fixtures/manifest.json")
    ap.add_argument("--alpha", type=float, default=0.1)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    raise SystemExit(run(args.manifest, args.alpha, args.out))
