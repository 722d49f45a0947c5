"""Downstream accuracy on protected versus original clouds.

``--task cls`` uses the 4-class suite (classification accuracy);
``--task seg`` uses 200 three-part rocket clouds (per-point accuracy).

    python scripts/usability_table.py --task cls
    python scripts/usability_table.py --task seg --epochs 60
"""
import argparse

from pointveil.crypto import keygen
from pointveil.data import SynthSpec, generate
from pointveil.downstream import DownstreamConfig, evaluate_corpus
from pointveil.metrics import write_reports
from pointveil.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--task", choices=("cls", "seg"), default="cls")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=None,
                    help="flow training epochs (default 30 for cls, 60 for seg)")
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--blocks", type=int, default=1)
    ap.add_argument("--lambda-as", type=float, default=1.0)
    ap.add_argument("--key-seed", type=int, default=1)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    if args.task == "cls":
        spec, task, epochs = SynthSpec(seed=args.seed), "classification", 30
    else:
        spec = SynthSpec(classes=("rocket",), clouds_per_class=200, seed=args.seed)
        task, epochs = "segmentation", 60
    ds = generate(spec)
    cfg = TrainConfig(hidden=args.hidden, epochs=args.epochs or epochs, task=task,
                      blocks=args.blocks, lambda_as=args.lambda_as, seed=args.seed)
    bundle = train(ds.subset("train"), cfg).bundle
    _, usability = evaluate_corpus(ds, bundle, keygen(args.key_seed),
                                   DownstreamConfig(seed=args.seed), epsilons=())
    write_reports(args.out or f"usability_{args.task}.csv", usability)
    for r in usability:
        print(f"{r.label:>10}  overall {r.accuracy_overall:.4f}  avg class {r.accuracy_avg_class:.4f}")


if __name__ == "__main__":
    main()
