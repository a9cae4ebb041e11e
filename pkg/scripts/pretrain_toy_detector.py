#!/usr/bin/env python3
"""Regenerate the bundled toy detector fixture.

Trains the small convnet on synthetic scenes and writes
src/stealthpatch/fixtures/toy_detector_v1.{npz,json}. The run is seeded, so
re-running reproduces the committed fixture on the same platform.
"""

import argparse
import logging
from pathlib import Path

from stealthpatch.detector import TOY_FIXTURE_VERSION
from stealthpatch.synthetic import pretrain_toy_detector


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    default_out = (Path(__file__).resolve().parent.parent
                   / "src" / "stealthpatch" / "fixtures" / TOY_FIXTURE_VERSION)
    parser.add_argument("--out", default=str(default_out),
                        help="fixture base path (writes .npz and .json)")
    parser.add_argument("--seed", type=int, default=20240601)
    parser.add_argument("--steps", type=int, default=700)
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")
    pretrain_toy_detector(args.out, seed=args.seed, steps=args.steps)
    print(f"fixture written to {args.out}.npz / .json")


if __name__ == "__main__":
    main()
