"""Angular-loss ablation: how far latent offsets turn away from the input offsets.

For each lambda_as value, trains the single-coupling flow and reports the
mean |cos| between each point's offset from its cloud centroid before and
after projection, plus the range of the signed cosines.

    python scripts/angular_ablation.py --lambdas 0 1 --epochs 30 100
"""
import argparse

import numpy as np

from pointveil.data import SynthSpec, generate
from pointveil.model import project
from pointveil.training import TrainConfig, latent_cosines, train


def cosines(bundle, ds, split):
    return np.concatenate([
        latent_cosines(ds.clouds[i], project(ds.clouds[i], bundle, labelled=True),
                       "classification")
        for i in ds.indices(split)])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 1.0])
    ap.add_argument("--epochs", type=int, nargs="+", default=[30])
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--complementary", action="store_true",
                    help="use the two complementary couplings instead of the single [T,F,F] one")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = generate(SynthSpec(seed=args.seed))
    print("lambda_as,epochs,split,mean_abs_cos,min_cos,max_cos")
    for las in args.lambdas:
        for epochs in args.epochs:
            cfg = TrainConfig(hidden=args.hidden, epochs=epochs, lambda_as=las, seed=args.seed,
                              faithful_single_coupling=not args.complementary)
            bundle = train(ds.subset("train"), cfg).bundle
            for split in ("train", "test"):
                c = cosines(bundle, ds, split)
                print(f"{las:g},{epochs},{split},{np.abs(c).mean():.4f},{c.min():.3f},{c.max():.3f}",
                      flush=True)


if __name__ == "__main__":
    main()
