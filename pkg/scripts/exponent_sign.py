"""Weak-form residual of the representation formula under both exponent signs.

    python3 scripts/exponent_sign.py --seed 0 --sigma 0.5
"""

import argparse

import numpy as np

from noisereg import fields as F
from noisereg import paths as P
from noisereg import transport as T
from noisereg.grid import Box, Grid


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sigma", type=float, default=0.5)
    ap.add_argument("--eps", type=float, default=0.2)
    ap.add_argument("--T", type=float, default=0.5)
    args = ap.parse_args(argv)
    g = Grid.with_spacing(Box.cube(1, 4.0), 2 ** -6)
    spec = F.mollify(F.catalog_spec("ex1-outward"), args.eps)
    c = F.ScalarSpec.divergence_of(spec)
    path = P.sample_brownian(args.seed, 0, P.TimeGrid(0.0, args.T, 200), 1, args.sigma)
    u0 = g.sample(lambda x: np.exp(-np.sum(x * x, axis=-1)))
    phi = lambda y: np.exp(-0.5 * np.sum(np.asarray(y) ** 2, axis=-1))
    dphi = lambda y: -np.asarray(y) * phi(y)[..., None]
    res = T.validate_exponent_sign(u0, c, spec, path, args.T, phi, dphi, n_snap=20)
    print(f"residual with minus sign: {res.residual_minus:.3e}")
    print(f"residual with plus sign:  {res.residual_plus:.3e}")
    print(f"selected sign: {res.sign:+.0f}")


if __name__ == "__main__":
    main()
