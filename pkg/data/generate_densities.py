#!/usr/bin/env python3
"""
Script to write sample circle densities for the w2 and gradcheck commands
Usage: python data/generate_densities.py [--n 4096] [--out data/densities]
"""
import argparse
import os
import sys
from pathlib import Path

import numpy as np

# Add parent directory to path to import app modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from app.models import PeriodicDensity
from app.services.circle_ot import CircleTransportService
from app.storage import write_density_csv


def sample_densities(n, seed=0):
    """Named densities sampled on tau_i = i / n"""
    t = np.arange(n) / n
    rng = np.random.default_rng(seed)
    return {
        "uniform": np.ones(n),
        "sine": 1.0 + 0.5 * np.sin(2.0 * np.pi * t),
        "sine_shifted": 1.0 + 0.5 * np.sin(2.0 * np.pi * (t - 0.1)),
        "two_bumps": 0.2 + np.exp(-80.0 * (t - 0.25) ** 2) + np.exp(-80.0 * (t - 0.7) ** 2),
        "random": rng.uniform(0.2, 3.0, n),
    }


def main():
    """Main function"""
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("--n", type=int, default=4096)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "densities"))
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    densities = sample_densities(args.n, args.seed)
    for name, values in densities.items():
        write_density_csv(out / f"{name}.csv", values)
    print(f"Wrote {len(densities)} densities with N={args.n} to {out}")

    print("\n--- Squared W2 against uniform ---")
    uniform = PeriodicDensity(densities["uniform"])
    for name, values in densities.items():
        solution = CircleTransportService.w2_circle(PeriodicDensity(values), uniform)
        print(f"{name:>13}: {solution.w2_squared:.6e} (alpha* {solution.alpha_star:+.6f})")


if __name__ == "__main__":
    main()
