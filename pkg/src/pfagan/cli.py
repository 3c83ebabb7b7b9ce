"""``pfa`` command line: pretrain-age, train, infer and evaluate."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .config import (load_config, partition_from, pretrain_config_from, set_key,
                     train_config_from)
from .core import AGING, AgeGroupPartition, orient
from .data import TEST, TRAIN, ingest, load_images, load_normalized, to_uint8
from .errors import ConfigError, DataError, NumericalError, PFAError
from .evaluation import config_hash, evaluate, make_ager, save_montage, write_report
from .metrics import IdentityEmbedder
from .networks import AgeEstimator, ConditionalGenerator, load_checkpoint, save_checkpoint
from .training import PFATrainer, pretrain_age_estimator, train

log = logging.getLogger("pfagan")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    code_version: str = __version__
    started: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    argv: list = field(default_factory=lambda: list(sys.argv[1:]))

    def write(self, directory) -> Path:
        path = Path(directory) / "run_manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        return path


def run_root() -> Path:
    return Path(os.environ.get("PFA_RUN_DIR", "run"))


def prepare_dir(path: Path, force: bool) -> Path:
    """Create ``path``; refuse to reuse a non-empty directory unless ``force``."""
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{path} already exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def resolve_config(args) -> dict:
    config = load_config(args.config)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        set_key(config, key.strip(), parse_value(value.strip()))
    if getattr(args, "data_root", None):
        config["data"]["root"] = args.data_root
    if getattr(args, "seed", None) is not None:
        for section in ("train", "pretrain"):
            config[section]["seed"] = args.seed
        config["data"]["seed"] = args.seed
    return config


def load_dataset(config: dict):
    """Ingest ``<data.root>/manifest.csv`` and load both splits as tensors."""
    root = Path(config["data"]["root"])
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise ConfigError(f"dataset manifest not found: {manifest}")
    partition = partition_from(config)
    records = ingest(manifest, root, partition, seed=int(config["data"]["seed"]),
                     train_fraction=float(config["data"]["train_fraction"]))
    size = int(config["data"]["size"])
    out = {"partition": partition}
    for split in (TRAIN, TEST):
        recs = [r for r in records if r.split == split]
        if not recs:
            out[split] = None
            continue
        images, kept, skipped = load_images(recs, size)
        if skipped:
            log.warning("%s split: skipped %d undecodable images", split, skipped)
        out[split] = {"images": images, "records": kept, "ages": [r.age for r in kept],
                      "groups": [r.group for r in kept], "ids": [r.identity_id for r in kept]}
    if out[TRAIN] is None:
        raise DataError("no training faces in the manifest")
    return out


def file_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# -- commands ----------------------------------------------------------------

def cmd_pretrain_age(args) -> int:
    config = resolve_config(args)
    if args.epochs is not None:
        config["pretrain"]["epochs"] = args.epochs
    out = prepare_dir(Path(args.out) if args.out else run_root() / "age", args.force)
    RunManifest("pretrain-age", config, int(config["pretrain"]["seed"])).write(out)
    data = load_dataset(config)
    n = data["partition"].n_groups
    train_set, val = data[TRAIN], data[TEST]
    reports = {}
    for name, seed_key in (("age_estimator", "seed"), ("age_oracle", "oracle_seed")):
        if name == "age_oracle" and args.no_oracle:
            continue
        cfg = pretrain_config_from(config, seed_key)
        net, report = pretrain_age_estimator(
            train_set["images"], train_set["ages"], train_set["groups"], cfg, n,
            val["images"] if val else None, val["ages"] if val else None,
            progress=lambda e, loss: log.info("epoch %d loss %.4f", e, loss))
        arch = {"n_groups": n, "image_size": int(config["data"]["size"]), "base_channels": cfg.base_channels}
        save_checkpoint(net, out / f"{name}.pt", arch,
                        {"bounds": list(data["partition"].bounds), "seed": cfg.seed, "epochs": cfg.epochs})
        reports[name] = report
        log.info("%s: %s", name, report)
    (out / "mae_report.json").write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    print(out)
    return 0


def _load_age_net(path, what: str) -> AgeEstimator:
    if path is None or not Path(path).is_file():
        raise ConfigError(f"{what} checkpoint not found: {path}")
    net, _ = load_checkpoint(path)
    if not isinstance(net, AgeEstimator):
        raise ConfigError(f"{path} is not an age estimator checkpoint")
    return net.eval()


def cmd_train(args) -> int:
    config = resolve_config(args)
    for key, value in (("mode", args.mode), ("age_net", args.age_net), ("direction", args.direction),
                       ("max_iterations", args.iterations)):
        if value is not None:
            config["train"][key] = value
    estimator = _load_age_net(args.age_checkpoint, "age estimator")
    cfg = train_config_from(config)
    run_dir = Path(args.run_dir) if args.run_dir else run_root() / time.strftime("%Y%m%d-%H%M%S")
    prepare_dir(run_dir, args.force)
    RunManifest("train", config, cfg.seed).write(run_dir)
    (run_dir / "config.snapshot").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    data = load_dataset(config)
    t = data[TRAIN]
    trainer = PFATrainer(cfg, data["partition"], estimator, t["images"], t["groups"], t["ages"])
    train(trainer, run_dir)
    if args.oracle and data[TEST] is not None:
        final = sorted((run_dir / "checkpoints").glob("generator_0*.pt"))[-1]
        _evaluate_into(config, data, final, args.oracle, run_dir / "eval")
    print(run_dir)
    return 0


def _evaluate_into(config, data, checkpoint, oracle_path, out_dir, sequential: bool = False) -> Path:
    generator, meta = load_checkpoint(checkpoint)
    if sequential and not isinstance(generator, ConditionalGenerator):
        raise ConfigError("--sequential needs a cgan_single (conditional generator) checkpoint")
    direction = meta.get("direction", AGING)
    ager = make_ager(generator, direction, sequential)
    oracle = _load_age_net(oracle_path, "evaluation oracle")
    test = data[TEST]
    if test is None:
        raise DataError("test split is empty")
    ev = config["eval"]
    report, fakes = evaluate(ager, test["images"], test["groups"], test["ids"], oracle,
                             IdentityEmbedder(int(ev["embedder_seed"])), data["partition"],
                             direction, splits=int(ev["splits"]), threshold=ev["threshold"],
                             far=float(ev["far"]), max_inputs=ev["max_inputs"])
    report["config_hash"] = config_hash(config)
    report["checkpoint_id"] = file_id(checkpoint)
    report["oracle_id"] = file_id(oracle_path)
    report["mode"] = "sequential_cgan" if sequential else meta.get("mode")
    path = write_report(report, out_dir)
    inputs = test["images"][np.flatnonzero(np.asarray(test["groups"]) == orient(1, len(report["groups"]), direction))]
    n = data["partition"].n_groups
    labels = [data["partition"].labels()[orient(p, n, direction) - 1] for p in range(1, n + 1)]
    save_montage([inputs] + [fakes[t] for t in sorted(fakes)], labels, Path(out_dir) / "montage.png")
    return path


def cmd_evaluate(args) -> int:
    config = resolve_config(args)
    checkpoint = args.sequential or args.checkpoint
    if checkpoint is None:
        raise ConfigError("evaluate needs --checkpoint or --sequential")
    if not Path(checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    out = prepare_dir(Path(args.out), args.force)
    data = load_dataset(config)
    print(_evaluate_into(config, data, checkpoint, args.oracle, out, sequential=bool(args.sequential)))
    return 0


def cmd_infer(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    generator, meta = load_checkpoint(args.checkpoint)
    n = generator.n_groups
    size = meta["image_size"]
    direction = meta.get("direction", AGING)
    bounds = meta.get("bounds")
    ager = make_ager(generator, direction, args.sequential)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    oracle = _load_age_net(args.oracle, "age oracle") if args.estimate_source else None
    if args.estimate_source and bounds is None:
        raise ConfigError("checkpoint metadata lacks age group bounds")

    for path in args.input:
        x = load_normalized(path, size).unsqueeze(0)
        if oracle is not None:
            with torch.no_grad():
                age = float(oracle(x)[0])
            source = AgeGroupPartition(tuple(bounds)).group_of(age)
            log.info("%s: estimated age %.1f -> group %d", path, age, source)
        elif args.source is not None:
            source = args.source
        else:
            raise ConfigError("give --source or --estimate-source")
        s = orient(source, n, direction)
        columns, names = [x], [f"g{source}"]
        for target in args.target:
            t = orient(target, n, direction)
            if t < s:
                valid = [g for g in range(1, n + 1) if orient(g, n, direction) >= s]
                raise ConfigError(f"target group {target} is not reachable from group {source} "
                                  f"({direction}); valid targets: {valid}")
            y = ager(x, s, t)
            Image.fromarray(to_uint8(y[0])).save(out / f"{Path(path).stem}_g{source}_to_g{target}.png")
            columns.append(y)
            names.append(f"g{target}")
        if args.montage:
            save_montage(columns, names, out / f"{Path(path).stem}_montage.png", rows=1)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--data-root")
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true", help="overwrite an existing output directory")

    p = sub.add_parser("pretrain-age", help="pre-train the age estimator and evaluation oracle")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.add_argument("--no-oracle", action="store_true", help="skip the held-out evaluation oracle")
    p.set_defaults(func=cmd_pretrain_age)

    p = sub.add_parser("train", help="train the aging generator")
    common(p)
    p.add_argument("--age-checkpoint", required=True)
    p.add_argument("--oracle", help="evaluation oracle; triggers a final evaluation")
    p.add_argument("--mode", choices=("pfa_end_to_end", "pfa_independent", "cgan_single"))
    p.add_argument("--age-net", choices=("dex_multitask", "classification_only"))
    p.add_argument("--direction", choices=("aging", "rejuvenation"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="age individual images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--source", type=int)
    p.add_argument("--estimate-source", action="store_true")
    p.add_argument("--oracle")
    p.add_argument("--target", type=int, nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--montage", action="store_true")
    p.add_argument("--sequential", action="store_true", help="apply a cGAN checkpoint one group at a time")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="compute the evaluation report")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--sequential", metavar="CGAN_CHECKPOINT",
                   help="evaluate a cgan_single checkpoint applied one group at a time")
    p.add_argument("--oracle", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PFAError as exc:
        print(f"pfa: error={type(exc).__name__} {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"pfa: error=ConfigError {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
