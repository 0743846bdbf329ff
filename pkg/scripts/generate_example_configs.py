#!/usr/bin/env python3
"""
Generate the example experiment configurations under configs/.

One file per experiment, desk-scale parameters (n <= 32, T <= 8). Keys not
listed take their schema defaults (see docs/config_schema.md).
"""

import os
import sys
from pathlib import Path
from typing import Dict

sys.path.insert(0, str(Path(__file__).parent.parent))

from core.experiments.loader import CONFIG_SCHEMA  # noqa: E402

# Configuration
OUTPUT_DIR = "configs"

EXAMPLES: Dict[str, Dict[str, str]] = {
    "steady": {"experiment": "steady", "n": "32", "mu": "0.1", "control": "mode:1.0"},
    "evolve": {
        "experiment": "evolve", "n": "32", "mu": "0.1", "dt": "0.01", "t_final": "1.0",
        "y0": "mode:0.5", "control": "zero", "snapshots": "5",
    },
    "optimize": {
        "experiment": "optimize", "variant": "unsteady", "n": "16", "mu": "0.1", "dt": "0.05",
        "t_final": "1.0", "target": "mode:0.2", "k": "0.1", "samples": "5",
    },
    "lq": {
        "experiment": "lq", "n": "16", "mu": "0.1", "dt": "0.05", "t_final": "4.0",
        "control": "mode:0.5", "y0": "random:0.1",
    },
    "decay": {
        "experiment": "decay", "n": "32", "mu": "0.1", "dt": "0.05",
        "decay_horizon": "4.0", "samples": "4", "control": "mode:0.5",
    },
    "stabilize": {
        "experiment": "stabilize", "n": "32", "mu": "0.1", "dt": "0.05", "t_final": "2.0",
        "y0": "mode:0.2", "control": "mode:0.5",
    },
    "turnpike": {
        "experiment": "turnpike", "n": "32", "mu": "0.02", "dt": "0.05", "horizons": "2, 4, 8",
        "target": "constructed", "target_control": "mode:0.02", "k": "1.0", "tol": "1e-10",
        "tracking_gate": "0.9", "offset": "mode", "max_iter": "400",
    },
    "gamma_convergence": {
        "experiment": "gamma_convergence", "n": "16", "mu": "0.1", "dt": "0.05", "horizons": "2, 4, 8",
        "target": "constructed", "target_control": "mode:0.2", "admissible_radius": "1.0",
    },
}


def write_config(name: str, values: Dict[str, str], output_dir: str = OUTPUT_DIR) -> str:
    """Write one `key = value` file; returns its path."""
    unknown = set(values) - set(CONFIG_SCHEMA)
    if unknown:
        raise KeyError(f"unknown keys for {name}: {sorted(unknown)}")
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, f"{name}.cfg")
    with open(path, "w") as f:
        f.write(f"# {name} experiment\n")
        for key, value in values.items():
            f.write(f"{key} = {value}\n")
    return path


def main():
    print("Generating example configurations...")
    for name, values in EXAMPLES.items():
        path = write_config(name, values)
        print(f"   {path}")
    print(f"{len(EXAMPLES)} configs written to {OUTPUT_DIR}/")


if __name__ == "__main__":
    main()
