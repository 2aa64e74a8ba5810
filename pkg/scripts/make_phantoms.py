#!/usr/bin/env python3
"""
Make Phantoms

Writes the documented charge-density phantoms as magnitude/phase PGM pairs on
the grid a run with the same N and automatic half extent will use.

Usage:
    python scripts/make_phantoms.py [--out phantoms] [--samples 64] [--noise 0.01] [--seed 0]

Phantoms:
    object   smooth disk with internal blobs and a radial phase
    noisy    object magnitude with seeded white noise added
    point    single spike at (2, 0), for the mirror/direct mapping check
    blobs    two Gaussian blobs of opposite sign, no phase
"""

import argparse
import sys
from pathlib import Path

import numpy as np

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from app.services.grid import make_grid, self_dual_half_extent  # noqa: E402
from app.services.matter import ChargeDensity  # noqa: E402
from app.services.phantoms import (  # noqa: E402
    gaussian_blobs,
    object_phantom,
    point_phantom,
    save_phantom,
    white_noise,
)


def main():
    parser = argparse.ArgumentParser(description="Write phantom PGM files")
    parser.add_argument("--out", type=Path, default=Path("phantoms"), help="Output directory")
    parser.add_argument("--samples", type=int, default=64, help="Samples per axis N")
    parser.add_argument("--radius", type=float, default=4.0, help="Object radius")
    parser.add_argument("--noise", type=float, default=0.01, help="Relative noise power")
    parser.add_argument("--seed", type=int, default=0, help="Noise seed")
    args = parser.parse_args()

    # Balanced sources get the self-dual auto extent for N >= 32
    grid = make_grid(args.samples, self_dual_half_extent(args.samples))
    obj = object_phantom(grid, radius=args.radius)

    magnitude = np.abs(obj.values)
    noisy_magnitude = np.clip(magnitude + white_noise(magnitude, args.noise, args.seed), 0, None)
    noisy = ChargeDensity.from_array(
        grid, noisy_magnitude * np.exp(1j * np.angle(obj.values)), phantom="noisy_object"
    )

    phantoms = {
        "object": (obj, True),
        "noisy": (noisy, True),
        "point": (point_phantom(grid, 2.0, 0.0), False),
        "blobs": (gaussian_blobs(grid, [(-1.5, 0.0), (1.5, 1.0)], [1.0, 0.6], [1.0, -0.5]), False),
    }

    print(f"Writing phantoms for N={grid.n}, half extent {grid.half_extent:.4f} to {args.out}")
    for name, (sigma, with_phase) in phantoms.items():
        phase_path = args.out / f"{name}_phase.pgm" if with_phase else None
        magnitude_path, _ = save_phantom(sigma, args.out / f"{name}_magnitude.pgm", phase_path)
        print(f"  {name}: {magnitude_path}" + (f", {phase_path}" if phase_path else ""))


if __name__ == "__main__":
    main()
