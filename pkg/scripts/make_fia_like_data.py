"""Write an inventory-format plot table and a matching prediction grid.

Usage: python scripts/make_fia_like_data.py --out data/ [--plots 46710] [--spacing 5]
"""

import argparse
import sys
from pathlib import Path

from hurdlesae.data import write_grid, write_plot_table
from hurdlesae.simulate import Landscape, synthetic_inventory


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--plots", type=int, default=46_710)
    p.add_argument("--spacing", type=float, default=5.0, help="grid spacing in km")
    p.add_argument("--species", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    land = Landscape(n_species=args.species, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    table = synthetic_inventory(args.plots, land, seed=args.seed)
    write_plot_table(table, args.out / "plots.csv")
    write_grid(land.grid(args.spacing), args.out / "grid.csv")
    print(f"{table.n} plots, {len(table.species)} species, {len(set(table.area_id))} areas -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
