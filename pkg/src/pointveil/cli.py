"""Command-line entry point.

Each subcommand only loads inputs, calls the library and writes outputs.
Settings come from a flat ``key = value`` file (``--config``) and may be
overridden by flags; every run echoes its effective settings as ``# key = value``
lines on standard output. Failures print one ``error: <category>: <message>``
line on standard error and exit with the category's code.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, fields

from . import crypto, data, downstream, metrics, model, training
from .errors import ConfigError, MismatchError, MissingFileError, PointVeilError

log = logging.getLogger("pointveil")


@dataclass
class RunConfig:
    """Every setting a run can take, with its default."""

    seed: int = 0
    task: str = "classification"
    # synthetic data
    classes: tuple = data.SynthSpec.classes
    points: int = data.SynthSpec.points
    clouds_per_class: int = data.SynthSpec.clouds_per_class
    jitter: float = data.SynthSpec.jitter
    oversample: int = data.SynthSpec.oversample
    # model and training
    lambda_s: float = 1.0
    lambda_p: float = 1.0
    lambda_as: float = 1.0
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    hidden: int = 512
    blocks: int = 1
    faithful_single_coupling: bool = False
    m: int = 32
    bound: float = 2.0
    learn_bound: bool = False
    cond_scale: float = 5.0
    mean_radius: float = 5.0
    candidates: int = 1000
    clip: float = 10.0
    # evaluation
    downstream_epochs: int = 20
    downstream_lr: float = 1e-2
    downstream_width: int = 64
    epsilons: tuple = (0.5, 1.0, 5.0, 10.0)
    emd: str = "exact"

    def synth_spec(self) -> data.SynthSpec:
        return data.SynthSpec(tuple(self.classes), self.points, self.clouds_per_class,
                              self.jitter, self.seed, self.oversample)

    def train_config(self) -> training.TrainConfig:
        known = {f.name for f in fields(training.TrainConfig)}
        return training.TrainConfig(**{k: v for k, v in asdict(self).items() if k in known})

    def downstream_config(self) -> downstream.DownstreamConfig:
        return downstream.DownstreamConfig(epochs=self.downstream_epochs, lr=self.downstream_lr,
                                           width=self.downstream_width, seed=self.seed)


TASK_ALIASES = {"cls": "classification", "seg": "segmentation",
                "classification": "classification", "segmentation": "segmentation"}


def _convert(name: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            return tuple(float(t) for t in items) if name == "epsilons" else tuple(items)
        return type(default)(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    defaults = asdict(RunConfig())
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _convert(key, value, defaults[key])
    return out


def build_config(config_path=None, overrides=None) -> RunConfig:
    """Defaults, then the config file, then flag ``overrides`` (None values ignored)."""
    values = {}
    if config_path:
        try:
            with open(config_path) as fh:
                values.update(parse_config_text(fh.read()))
        except FileNotFoundError:
            raise MissingFileError(f"no such file: {config_path}") from None
    defaults = asdict(RunConfig())
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(key, value, defaults[key]) if isinstance(value, str) else value
    if "task" in values:
        if values["task"] not in TASK_ALIASES:
            raise ConfigError(f"task must be cls or seg, got {values['task']!r}")
        values["task"] = TASK_ALIASES[values["task"]]
    return RunConfig(**values)


def echo_config(cfg: RunConfig, out=None) -> None:
    out = out or sys.stdout
    for key, value in asdict(cfg).items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        print(f"# {key} = {value}", file=out)


def _sets(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value
    return out


def _config(args, **flags) -> RunConfig:
    overrides = _sets(getattr(args, "set", None))
    overrides.update({k: v for k, v in flags.items() if v is not None})
    cfg = build_config(getattr(args, "config", None), overrides)
    echo_config(cfg)
    return cfg


def _task_dataset(path, task: str) -> data.Dataset:
    dataset = data.load_dataset(path)
    if task == "segmentation":
        dataset, _ = data.globalize_parts(dataset)
    return dataset


def _check_task(bundle: model.ModelBundle, task: str) -> None:
    if bundle.task != task:
        raise MismatchError(f"model was trained for {bundle.task}, not {task}")


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> None:
    cfg = _config(args, seed=args.seed)
    dataset = data.generate(cfg.synth_spec())
    data.save_dataset(args.out, dataset)
    print(f"wrote {len(dataset)} clouds to {args.out}")


def cmd_keygen(args) -> None:
    cfg = _config(args, seed=args.seed)
    crypto.save_key(args.out, crypto.keygen(cfg.seed, args.m))
    print(f"wrote key to {args.out}")


def cmd_train(args) -> None:
    cfg = _config(args, seed=args.seed, task=args.task, epochs=args.epochs)
    dataset = _task_dataset(args.data, cfg.task)
    train_set = dataset.subset("train") if dataset.indices("train") else dataset
    if args.trace:
        with open(args.trace, "w") as fh:
            fh.write(training.TRACE_HEADER + "\n")
    result = training.train(train_set, cfg.train_config(), trace_path=args.trace)
    model.save_model(args.out, result.bundle)
    print(f"final loss {result.trace[-1][-1]:.6g}; wrote model to {args.out}")


def cmd_encrypt(args) -> None:
    _config(args)
    bundle = model.load_model(args.model)
    key = crypto.load_key(args.key)
    cloud, changed = data.ensure_normalized(data.load_cloud(args.inp))
    if changed:
        log.warning("input was not normalized; the protected cloud (and any decryption) "
                    "is in normalized coordinates")
    crypto.save_protected(args.out, crypto.encrypt(model.project(cloud, bundle), key))
    print(f"wrote protected cloud to {args.out}")


def cmd_decrypt(args) -> None:
    _config(args)
    bundle = model.load_model(args.model)
    key = crypto.load_key(args.key)
    protected = crypto.load_protected(args.inp)
    crypto.check_shape_latent(protected.e, bundle.gmm_e, bundle.e_radius)
    data.save_xyz(args.out, model.unproject(crypto.decrypt(protected, key), bundle))
    print(f"wrote reconstruction to {args.out}")


def cmd_eval(args) -> None:
    cfg = _config(args, seed=args.seed, task=args.task)
    bundle = model.load_model(args.model)
    _check_task(bundle, cfg.task)
    key = crypto.load_key(args.key)
    dataset = _task_dataset(args.data, cfg.task)
    privacy, usability = downstream.evaluate_corpus(
        dataset, bundle, key, cfg.downstream_config(), cfg.epsilons, cfg.emd)
    with open(args.out, "w", newline="") as fh:
        metrics.write_reports(fh, privacy)
        fh.write("\n")
        metrics.write_reports(fh, usability)
    for rep in privacy + usability:
        print(f"{rep.label}: cd={rep.cd:.6g} emd={rep.emd:.6g} "
              f"acc={rep.accuracy_overall:.4f} avg_class={rep.accuracy_avg_class:.4f}")
    print(f"wrote report to {args.out}")


def cmd_attack(args) -> None:
    cfg = _config(args, seed=args.seed)
    bundle = model.load_model(args.model)
    key = crypto.load_key(args.key)
    dataset = data.load_dataset(args.data)
    train_set, test_set = dataset.subset("train"), dataset.subset("test")
    K = len(dataset.class_names)
    attacker = downstream.train_attacker(train_set.clouds, K, cfg.downstream_config())
    labels = [c.shape_label for c in test_set.clouds]
    orig = downstream.classification_report(attacker, test_set.clouds, labels, K, "original")
    prot = downstream.attack_eval(attacker, downstream.protect(test_set.clouds, bundle, key),
                                  labels, K)
    metrics.write_reports(sys.stdout, [orig, prot])


def cmd_metrics(args) -> None:
    cfg = _config(args, emd=args.emd)
    a = data.load_cloud(args.a)
    b = data.load_cloud(args.b)
    cd, emd, method = downstream.similarity(a.points, b.points, cfg.emd)
    metrics.write_reports(sys.stdout, [metrics.MetricReport(cd, emd, method, label="a_vs_b")])


def cmd_dp(args) -> None:
    cfg = _config(args, seed=args.seed)
    cloud, _ = data.ensure_normalized(data.load_cloud(args.inp))
    data.save_xyz(args.out, data.laplace_perturb(cloud, args.epsilon, cfg.seed))
    print(f"wrote perturbed cloud to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointveil",
                                     description="Latent-space rotation protection for point clouds.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one setting (repeatable)")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic labelled dataset")
    p.add_argument("--spec", dest="config", help="settings file (alias of --config)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("keygen", cmd_keygen, "draw a rotation key")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, help="also draw an m x m shape-latent rotation")

    p = add("train", cmd_train, "train encoder, shape flow and point flow")
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=sorted(TASK_ALIASES))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--trace", help="per-epoch loss CSV")

    for name, func, help_text, out_help in (
            ("encrypt", cmd_encrypt, "protect one cloud", ".pfe output"),
            ("decrypt", cmd_decrypt, "recover one cloud", ".xyz output")):
        p = add(name, func, help_text)
        p.add_argument("--model", required=True)
        p.add_argument("--key", required=True)
        p.add_argument("--in", dest="inp", required=True)
        p.add_argument("--out", required=True, help=out_help)

    p = add("eval", cmd_eval, "privacy and usability report for a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=sorted(TASK_ALIASES))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("attack", cmd_attack, "train an attacker on originals, test it on protected clouds")
    p.add_argument("--model", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)

    p = add("metrics", cmd_metrics, "Chamfer and EMD between two clouds")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--emd", choices=("exact", "entropic"))

    p = add("dp", cmd_dp, "Laplace-perturb one cloud")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PointVeilError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
