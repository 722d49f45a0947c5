"""Reconstruction under correct and wrong keys for one protected cloud per class.

Rows: both keys correct, wrong R_p only, wrong R_c only, both wrong. Values
are Chamfer distances between the reconstruction and the original.

    python scripts/wrong_keys.py --epochs 30 --save-dir recon/
"""
import argparse
from pathlib import Path

from pointveil.crypto import RotationKey, encrypt, keygen, decrypt
from pointveil.data import SynthSpec, generate, save_xyz
from pointveil.downstream import reconstruct_eval
from pointveil.model import project, unproject
from pointveil.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--save-dir", default=None, help="also write each reconstruction as .xyz")
    args = ap.parse_args()

    ds = generate(SynthSpec(seed=args.seed))
    bundle = train(ds.subset("train"), TrainConfig(hidden=args.hidden, epochs=args.epochs,
                                                   seed=args.seed)).bundle
    key, other = keygen(1), keygen(2)
    keys = {"correct": key,
            "wrong_Rp": RotationKey(other.R_p, key.R_c),
            "wrong_Rc": RotationKey(key.R_p, other.R_c),
            "wrong_both": other}
    print("class," + ",".join(keys))
    seen = set()
    for cloud in ds.subset("test").clouds:
        if cloud.shape_label in seen:
            continue
        seen.add(cloud.shape_label)
        name = ds.class_names[cloud.shape_label]
        prot = encrypt(project(cloud, bundle), key)
        table = reconstruct_eval(prot, cloud, keys, bundle)
        print(name + "," + ",".join(f"{table[k]:.4g}" for k in keys))
        if args.save_dir:
            out = Path(args.save_dir)
            out.mkdir(parents=True, exist_ok=True)
            for label, k in keys.items():
                save_xyz(out / f"{name}_{label}.xyz", unproject(decrypt(prot, k), bundle))


if __name__ == "__main__":
    main()
