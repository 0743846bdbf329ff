#!/usr/bin/env python3
"""
Write the target field of a config as a snapshot file.

Useful to freeze a constructed or random target so that later configs can
refer to it with `target = file:<path>`.

Usage:
    python scripts/generate_target.py --config configs/turnpike.cfg --out fields/target.csv
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from core.errors import TurnpikeError  # noqa: E402
from core.experiments.loader import load_config  # noqa: E402
from core.experiments.service import ExperimentRunner  # noqa: E402
from core.mesh.grid import ForceField  # noqa: E402
from core.mesh.loader import write_field  # noqa: E402
from core.mesh.operators import max_divergence, norm_l2  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description="Write the target field of an experiment config")
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", required=True, help="snapshot CSV to write")
    args = parser.parse_args()

    print(f"Building target of {args.config}...")
    try:
        config = load_config(args.config)
        target = ExperimentRunner(config).build_field("target", ForceField)
    except TurnpikeError as e:
        print(f"Failed: {e}")
        return 1

    path = write_field(args.out, target.as_velocity())
    print(f"   n={config.n}, |target|={norm_l2(target):.6e}, max |div|={max_divergence(target.as_velocity()):.3e}")
    print(f"Target written to {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
