#!/usr/bin/env python3
"""Run (or resume) the full default pipeline into one artifact home.

Usage:
    python scripts/run_pipeline.py [--home DIR] [--config overrides.json]
                                   [--seeds 0,1,2]

The artifact home defaults to $LATENTFACE_HOME or ./latentface_home. Every
step is idempotent, so re-running after an interruption continues where it
left off. Expect roughly 1-2 hours on a laptop-class CPU for the default
configuration.
"""

import argparse
import os
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from latentface.config import RunConfig, apply_overrides
from latentface.pipeline import build_pipeline
from latentface.trainer import ArtifactPaths
from latentface.utils import configure_torch, read_json


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--home", default=os.environ.get("LATENTFACE_HOME", "latentface_home"))
    parser.add_argument("--config", help="JSON config override file")
    parser.add_argument("--seeds", default="0,1,2", help="comma-separated TFG run seeds")
    args = parser.parse_args()

    configure_torch()
    config = RunConfig()
    if args.config:
        config = apply_overrides(config, read_json(args.config))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    build_pipeline(config, ArtifactPaths(Path(args.home)), tfg_seeds=seeds)
    return 0


if __name__ == "__main__":
    sys.exit(main())
