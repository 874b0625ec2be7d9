"""Command line entry point: ``latkit {train,attack,eval,report,repro}``.

Every option can also come from a ``key = value`` config file given with
``--config``; command line flags win. Exit codes: 0 ok, 2 input error,
3 numeric error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from latkit import __version__
from latkit.attack import AttackSpec, attack_dataset, quantize_within_budget
from latkit.checkpoint import load_model
from latkit.config import Settings, dump_config, read_config, strategy_from_settings
from latkit.data import Dataset, load_cifar10, load_mnist, write_cifar10, write_mnist
from latkit.errors import InputError, LatError, NumericError
from latkit.mask import build_epsilon_matrix
from latkit.report import (
    build_eval_sets,
    cross_matrix,
    emit_report,
    evaluate,
    per_image_report,
    summarize,
    write_per_image_csv,
)
from latkit.tensor_core import OptimizerConfig
from latkit.train import TrainConfig, lat_train, train_natural

log = logging.getLogger("latkit")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


# ---------------------------------------------------------------------------
# option groups; each flag's dest is the config key it overrides


def _data_flags(p, split):
    g = p.add_argument_group("data")
    g.add_argument("--dataset", choices=["mnist", "cifar10"])
    g.add_argument(f"--{split}-images", dest=f"{split}_images", help="MNIST IDX image file")
    g.add_argument(f"--{split}-labels", dest=f"{split}_labels", help="MNIST IDX label file")
    g.add_argument(f"--cifar-{split}", dest=f"cifar_{split}", help="comma-separated CIFAR-10 .bin files")
    g.add_argument(f"--{split}-limit", dest=f"{split}_limit", type=int, help="use only the first N examples")


def _attack_flags(p, prefix=""):
    g = p.add_argument_group("attack")
    g.add_argument("--strategy", dest=prefix + "strategy",
                   choices=["none", "full", "center_exempt", "bbox_exempt", "file"])
    g.add_argument("--epsilon", dest=prefix + "epsilon", type=float)
    g.add_argument("--attack-steps", dest=prefix + "attack_steps", type=int)
    g.add_argument("--step-size", dest=prefix + "step_size", type=float)
    g.add_argument("--center-fraction", dest=prefix + "center_fraction", type=float)
    g.add_argument("--boxes", dest=prefix + "boxes", help="x0,y0,x1,y1[;x0,y0,x1,y1...]")
    g.add_argument("--mask-file", dest=prefix + "mask_file")
    g.add_argument("--random-start", dest=prefix + "random_start", action="store_const", const="true")
    g.add_argument("--last-iterate", dest=prefix + "best_iterate", action="store_const", const="false")
    g.add_argument("--attack-seed", dest=prefix + "attack_seed", type=int)


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--steps", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--optimizer", choices=["adam", "sgd"])
    g.add_argument("--lr", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    g.add_argument("--mix-natural-fraction", dest="mix_natural_fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latkit", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="natural training or localized adversarial training")
    p.add_argument("--config")
    _data_flags(p, "train")
    _train_flags(p)
    _attack_flags(p)
    p.add_argument("--run-dir", dest="run_dir")

    p = sub.add_parser("attack", help="craft an adversarial copy of a dataset")
    p.add_argument("--config")
    p.add_argument("--model", dest="model", required=False)
    _data_flags(p, "test")
    _attack_flags(p)
    p.add_argument("--out", dest="out", help="output prefix")

    p = sub.add_parser("eval", help="loss/accuracy of one model on one dataset")
    p.add_argument("--config")
    p.add_argument("--model", dest="model")
    _data_flags(p, "test")
    p.add_argument("--model-id", dest="model_id")
    p.add_argument("--input-type", dest="input_type")
    p.add_argument("--per-image", dest="per_image", help="write a per-image CSV here")
    p.add_argument("--altered-pct", dest="altered_pct", type=float,
                   help="percent of pixels altered, recorded in the per-image rows")

    p = sub.add_parser("report", help="cross-evaluate models on natural and white-box adversarial inputs")
    p.add_argument("--config")
    p.add_argument("--model", dest="models", action="append", metavar="NAME=PATH")
    _data_flags(p, "test")
    _attack_flags(p, prefix="eval_")
    p.add_argument("--out", dest="out")

    p = sub.add_parser("repro", help="train natural/standard/background models and report")
    p.add_argument("--config", required=True)
    p.add_argument("--out", dest="out")
    return parser


def _settings(args) -> Settings:
    values = read_config(args.config) if getattr(args, "config", None) else {}
    skip = {"command", "config", "verbose", "models"}
    for key, value in vars(args).items():
        if key in skip or value is None:
            continue
        values[key] = str(value)
    return Settings(values)


# ---------------------------------------------------------------------------
# builders


def load_split(s: Settings, split: str) -> Dataset:
    dataset = s.str("dataset", "mnist")
    if dataset == "mnist":
        images, labels = s.str(f"{split}_images"), s.str(f"{split}_labels")
        if not images or not labels:
            raise InputError(f"MNIST needs --{split}-images and --{split}-labels")
        data = load_mnist(images, labels)
    elif dataset == "cifar10":
        paths = s.list(f"cifar_{split}")
        if not paths:
            raise InputError(f"CIFAR-10 needs --cifar-{split}")
        data = load_cifar10(paths)
    else:
        raise InputError(f"unknown dataset {dataset!r}")
    limit = s.int(f"{split}_limit") or s.int("eval_size" if split == "test" else "train_limit")
    return data.head(limit) if limit else data


def attack_from_settings(s: Settings, kind: str | None = None, prefix: str = "") -> AttackSpec | None:
    kind = kind or s.str(prefix + "strategy", "full")
    if kind == "none":
        return None
    return AttackSpec(
        strategy=strategy_from_settings(s, kind, prefix),
        steps=s.int(prefix + "attack_steps", 100),
        step_size=s.float(prefix + "step_size"),
        random_start=s.bool(prefix + "random_start", False),
        best_iterate=s.bool(prefix + "best_iterate", True),
        seed=s.int(prefix + "attack_seed", 0),
    )


def train_config_from_settings(s: Settings, attack: AttackSpec | None) -> TrainConfig:
    return TrainConfig(
        total_steps=s.int("steps", 1000),
        batch_size=s.int("batch_size", 50),
        optimizer=OptimizerConfig(kind=s.str("optimizer", "adam"), lr=s.float("lr", 1e-4)),
        attack=attack,
        seed=s.int("seed", 0),
        checkpoint_every=s.int("checkpoint_every", 0),
        mix_natural_fraction=s.float("mix_natural_fraction", 0.0),
    )


def _run_training(config: TrainConfig, data: Dataset, run_dir: str | None):
    if config.attack is None:
        return train_natural(config, data, run_dir)
    return lat_train(config, data, run_dir)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    s = _settings(args)
    config = train_config_from_settings(s, attack_from_settings(s, s.str("strategy", "none")))
    data = load_split(s, "train")
    run_dir = s.str("run_dir", "run")
    _run_training(config, data, run_dir)
    print(os.path.join(run_dir, "final.latm"))
    return EXIT_OK


def _require(s: Settings, key: str, flag: str) -> str:
    value = s.str(key)
    if not value:
        raise InputError(f"missing {flag}")
    return value


def cmd_attack(args) -> int:
    s = _settings(args)
    model = load_model(_require(s, "model", "--model"))
    spec = attack_from_settings(s)
    if spec is None:
        raise InputError("attack needs a strategy other than none")
    out = _require(s, "out", "--out")
    data = load_split(s, "test")
    adv = attack_dataset(model, data, spec, model_id=s.str("model"))
    ep = build_epsilon_matrix(data.image_shape, spec.strategy)
    pixels = quantize_within_budget(adv.images, data.images, ep)
    meta = dict(adv.meta)
    meta["source_format"] = s.str("dataset", "mnist")
    meta["quantization"] = "nearest byte, clamped to the budget"
    if s.str("dataset", "mnist") == "mnist":
        paths = [f"{out}-images-idx3-ubyte", f"{out}-labels-idx1-ubyte"]
        write_mnist(adv, *paths, pixels=pixels)
    else:
        paths = [f"{out}.bin"]
        write_cifar10(adv, paths[0], pixels=pixels)
    with open(f"{out}.meta", "w", encoding="utf-8") as fh:
        fh.write(dump_config(meta))
    for p in paths + [f"{out}.meta"]:
        print(p)
    return EXIT_OK


def cmd_eval(args) -> int:
    s = _settings(args)
    model = load_model(_require(s, "model", "--model"))
    data = load_split(s, "test")
    rep = evaluate(model, data, s.str("model_id", "model"), s.str("input_type", "natural"))
    print("model,input_type,loss,accuracy,n")
    print(f"{rep.model_id},{rep.input_type},{rep.mean_cross_entropy!r},{rep.accuracy!r},{rep.n}")
    if s.has("per_image"):
        records = per_image_report(model, data, s.float("altered_pct"))
        write_per_image_csv(records, s.str("per_image"))
        avg = summarize(records)
        print("average," + ",".join(f"{k}={v:.6g}" for k, v in avg.items()))
    return EXIT_OK


def _eval_attacks(s: Settings) -> dict:
    return {
        "standard_adv": attack_from_settings(s, "full", "eval_"),
        "background_adv": attack_from_settings(s, "center_exempt", "eval_"),
    }


def _parse_models(specs) -> dict:
    models = {}
    for spec in specs or []:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise InputError(f"--model expects NAME=PATH, got {spec!r}")
        models[name] = load_model(path)
    if not models:
        raise InputError("report needs at least one --model NAME=PATH")
    return models


def _write_report(s: Settings, models: dict, natural: Dataset, out: str) -> None:
    sets = build_eval_sets(models, natural, _eval_attacks(s))
    reports = cross_matrix(models, sets, ["natural", "standard_adv", "background_adv"])
    paths = emit_report(reports, out, s.str("dataset", "mnist"))
    with open(paths["matrix"], encoding="utf-8") as fh:
        sys.stdout.write(fh.read())


def cmd_report(args) -> int:
    s = _settings(args)
    models = _parse_models(args.models)
    _write_report(s, models, load_split(s, "test"), s.str("out", "report"))
    return EXIT_OK


REPRO_MODELS = (("natural", "none"), ("standard", "full"), ("background", "center_exempt"))


def cmd_repro(args) -> int:
    """Train the three models (reusing finished runs with identical configs) and report."""
    s = _settings(args)
    out = s.str("out", "repro")
    train = load_split(s, "train")
    test = load_split(s, "test")
    models = {}
    for name, kind in REPRO_MODELS:
        config = train_config_from_settings(s, attack_from_settings(s, kind))
        run_dir = os.path.join(out, name)
        final = os.path.join(run_dir, "final.latm")
        echo = os.path.join(run_dir, "config.txt")
        if os.path.exists(final) and os.path.exists(echo):
            with open(echo, encoding="utf-8") as fh:
                if fh.read() == dump_config(config.as_dict()):
                    log.info("reusing %s", final)
                    models[name] = load_model(final)
                    continue
        log.info("training %s model", name)
        models[name] = _run_training(config, train, run_dir)
    _write_report(s, models, test, os.path.join(out, "report"))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "report": cmd_report,
            "repro": cmd_repro}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"latkit: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LatError, ValueError) as exc:
        print(f"latkit: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
