"""Command-line interface: train, evaluate, attack, corrupt, saliency, gradcheck."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields

import numpy as np

from .attacks import AttackConfig, run_attack
from .corruptions import KINDS as CORRUPTION_KINDS, CorruptionSpec, corrupt
from .data import Dataset, save_dataset, split
from .harness import ATTACK_PRESETS, EVAL_ORDER, MetricsReport, RunConfig, \
    build_run_config, evaluate, eval_noise_mode, gradcheck, load_run_dataset, \
    parse_config_file, train
from .network import LayerSpec, load_checkpoint, predict, \
    validate_composition
from .saliency import SaliencyConfig, saliency_map, write_pgm
from .tensor import RngStream


def parse_arch(layers: str, input_shape) -> list[LayerSpec]:
    """Parse a compact layer grammar into specs.

    Comma-separated entries:
      dense:<units>:<activation>[:<noise>]
      conv:<kernels>:<activation>[:<noise>][:pool]
    noise is one of none|fixed|trainable (default none); fan-in and channel
    counts are inferred by chaining from the input shape.
    """
    shape = tuple(int(v) for v in input_shape)
    specs = []
    for item in layers.split(","):
        parts = item.strip().split(":")
        if len(parts) < 3:
            raise ValueError(f"cannot parse layer {item!r}")
        kind, size, activation = parts[0], int(parts[1]), parts[2]
        noise = "none"
        pool = False
        for extra in parts[3:]:
            if extra == "pool":
                pool = True
            else:
                noise = extra
        if kind == "dense":
            fan_in = int(np.prod(shape))
            specs.append(LayerSpec(kind="dense", fan_in=fan_in, fan_out=size,
                                   activation=activation, noise=noise))
            shape = (size,)
        elif kind == "conv":
            if len(shape) != 3:
                raise ValueError(f"conv layer {item!r} needs (C, H, W) input")
            c, h, w = shape
            specs.append(LayerSpec(kind="conv", in_channels=c, channels=size,
                                   activation=activation, noise=noise,
                                   pool=pool))
            shape = (size, h // 2 if pool else h, w // 2 if pool else w)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    validate_composition(specs, tuple(int(v) for v in input_shape))
    return specs


def _parse_shape(text: str) -> tuple:
    return tuple(int(p) for p in text.lower().split("x"))


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=("mnist", "digits", "blobs", "container"))
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--data-path", dest="data_path")
    p.add_argument("--subset", type=int)
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    p.add_argument("--seed", type=int)


_OVERRIDE_FIELDS = {f.name for f in fields(RunConfig)}


def _config_from_args(args) -> RunConfig:
    file_values = parse_config_file(args.config) if getattr(args, "config", None) \
        else {}
    overrides = {name: getattr(args, name)
                 for name in _OVERRIDE_FIELDS if getattr(args, name, None) is not None}
    return build_run_config(file_values, overrides=overrides)


def _dataset_for_checkpoint(args, extra) -> tuple[Dataset, RunConfig]:
    """Rebuild the training-time data config (overridable) and return its
    test split, so evaluation sees held-out samples."""
    saved = extra.get("run_config", {})
    known = {k: v for k, v in saved.items() if k in _OVERRIDE_FIELDS}
    cfg = RunConfig(**known) if known else RunConfig()
    for name in _OVERRIDE_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    cfg.validate()
    ds = load_run_dataset(cfg)
    if cfg.subset and cfg.subset < len(ds):
        perm = RngStream(cfg.seed, 0x54).permutation(len(ds))
        ds = ds.subset(perm[:cfg.subset])
    return ds, cfg


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    net, report, ckpt = train(cfg)
    if report.curves:
        last = report.curves[-1]
        print(f"trained {cfg.run_name()}: epochs={cfg.epochs} "
              f"train_loss={last.train_loss:.4f} val_loss={last.val_loss:.4f} "
              f"test_accuracy={last.test_accuracy:.4f}")
    else:
        print(f"initialized {cfg.run_name()} (0 epochs)")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    net, _, extra = load_checkpoint(args.checkpoint)
    ds, cfg = _dataset_for_checkpoint(args, extra)
    _, _, test_ds = split(ds, (cfg.split_train, cfg.split_val, cfg.split_test),
                          seed=cfg.seed)
    suite = tuple(s.strip() for s in args.suite.split(",")) if args.suite \
        else tuple(e for e in EVAL_ORDER if args.surrogate or
                   not e.startswith("transfer_"))
    surrogate = None
    if args.surrogate:
        surrogate, _, _ = load_checkpoint(args.surrogate)
    report = evaluate(net, test_ds, suite=suite, surrogate=surrogate,
                      seed=cfg.seed if args.eval_seed is None else args.eval_seed,
                      eval_noise=args.eval_noise or "auto",
                      family=args.family, model_id=extra.get("name", "model"))
    report.write_rows_csv(args.out)
    for row in report.rows:
        print(f"{row.model} {row.eval_id} {row.params} {row.accuracy:.4f}")
    print(f"report: {args.out}")
    return 0


def cmd_attack(args) -> int:
    net, _, extra = load_checkpoint(args.checkpoint)
    ds, cfg = _dataset_for_checkpoint(args, extra)
    _, _, test_ds = split(ds, (cfg.split_train, cfg.split_val, cfg.split_test),
                          seed=cfg.seed)
    base = dict(ATTACK_PRESETS[args.family][args.kind])
    if args.alpha is not None:
        base["alpha"] = args.alpha
    if args.eps is not None:
        base["eps"] = args.eps
    if args.steps is not None:
        base["steps"] = args.steps
    acfg = AttackConfig(kind=args.kind, seed=args.attack_seed, **base)
    adv = run_attack(net, test_ds.images, test_ds.labels, acfg)
    mode = eval_noise_mode(net, args.eval_noise or "auto")
    preds = predict(net, adv, noise_mode=mode,
                    rng=RngStream(acfg.seed, 0xE7A1))
    acc = float(np.mean(preds == test_ds.labels))
    out_ds = Dataset(adv, test_ds.labels, name=f"{test_ds.name}-{args.kind}",
                     n_classes=test_ds.n_classes)
    save_dataset(out_ds, args.out_prefix + ".nnd")
    report = MetricsReport()
    from .harness import EvalRow, _params_str
    report.rows.append(EvalRow(extra.get("name", "model"), args.kind,
                               _params_str(acfg), acc))
    report.write_rows_csv(args.out_prefix + ".csv")
    print(f"{args.kind} accuracy={acc:.4f} -> {args.out_prefix}.nnd / .csv")
    return 0


def cmd_corrupt(args) -> int:
    cfg = _config_from_args(args)
    ds = load_run_dataset(cfg)
    if cfg.subset and cfg.subset < len(ds):
        perm = RngStream(cfg.seed, 0x54).permutation(len(ds))
        ds = ds.subset(perm[:cfg.subset])
    spec = CorruptionSpec(kind=args.kind, severity=args.severity,
                          seed=args.corrupt_seed)
    out = Dataset(corrupt(ds.images, spec), ds.labels,
                  name=f"{ds.name}-{args.kind}{args.severity}",
                  n_classes=ds.n_classes)
    save_dataset(out, args.out)
    print(f"corrupted {len(out)} images ({args.kind} severity {args.severity}) "
          f"-> {args.out}")
    return 0


def cmd_saliency(args) -> int:
    net, _, extra = load_checkpoint(args.checkpoint)
    ds, cfg = _dataset_for_checkpoint(args, extra)
    _, _, test_ds = split(ds, (cfg.split_train, cfg.split_val, cfg.split_test),
                          seed=cfg.seed)
    indices = [int(i) for i in args.indices.split(",")]
    scfg = SaliencyConfig(smoothing_std=args.std, samples=args.samples,
                          noise_mode=args.noise_mode)
    os.makedirs(args.out_dir, exist_ok=True)
    model = extra.get("name", "model")
    stream = RngStream(args.saliency_seed, 0x5A11E)
    for index in indices:
        image = test_ds.images[index]
        cls = int(predict(net, image[None], noise_mode="disabled")[0])
        smap = saliency_map(net, image, scfg, stream=stream.substream(index))
        path = os.path.join(args.out_dir, f"{model}_{index}_{cls}.pgm")
        write_pgm(smap, path)
        print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    input_shape = _parse_shape(args.input)
    specs = parse_arch(args.layers, input_shape)
    report = gradcheck(specs, input_shape, seed=args.seed,
                       tolerance=args.tolerance, h=args.h)
    print(report.summary())
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisynet",
        description="Train noisy networks and evaluate their robustness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the joint weight/noise training loop")
    p.add_argument("--config", help="flat key-value config file")
    _add_data_flags(p)
    p.add_argument("--preset", choices=("mlp", "mlp_plus", "mlp_n", "cnn",
                                        "cnn_mlp_plus", "cnn_a_plus",
                                        "cnn_mlp_n", "cnn_a_n", "mlp_surrogate"))
    p.add_argument("--activation", choices=("relu", "sigmoid"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--sigma-lr", dest="sigma_lr", type=float)
    p.add_argument("--sigma-init", dest="sigma_init", type=float)
    p.add_argument("--eval-noise", dest="eval_noise",
                   choices=("auto", "active", "disabled"))
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--name")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run an evaluation suite on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.add_argument("--suite", help="comma list, e.g. clean,fgsm,pgd,gaussian")
    p.add_argument("--surrogate", help="surrogate checkpoint for transfer attacks")
    p.add_argument("--family", default="mnist", choices=tuple(ATTACK_PRESETS))
    p.add_argument("--eval-noise", dest="eval_noise",
                   choices=("auto", "active", "disabled"))
    p.add_argument("--eval-seed", dest="eval_seed", type=int)
    p.add_argument("--out", default="report.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attack", help="dump adversarial examples for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.add_argument("--kind", required=True, choices=("fgsm", "pgd", "lbfgs"))
    p.add_argument("--family", default="mnist", choices=tuple(ATTACK_PRESETS))
    p.add_argument("--alpha", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--attack-seed", dest="attack_seed", type=int, default=0)
    p.add_argument("--eval-noise", dest="eval_noise",
                   choices=("auto", "active", "disabled"))
    p.add_argument("--out-prefix", dest="out_prefix", default="attack")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("corrupt", help="write a corrupted copy of a dataset")
    p.add_argument("--config", help="flat key-value config file")
    _add_data_flags(p)
    p.add_argument("--kind", required=True, choices=CORRUPTION_KINDS)
    p.add_argument("--severity", type=int, required=True)
    p.add_argument("--corrupt-seed", dest="corrupt_seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("saliency", help="emit smoothed saliency maps as PGM")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.add_argument("--indices", default="0", help="comma list of test indices")
    p.add_argument("--samples", type=int, default=25)
    p.add_argument("--std", type=float, default=0.15)
    p.add_argument("--noise-mode", dest="noise_mode", default="disabled",
                   choices=("active", "disabled"))
    p.add_argument("--saliency-seed", dest="saliency_seed", type=int, default=0)
    p.add_argument("--out-dir", dest="out_dir", default="saliency")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("gradcheck", help="finite-difference gradient self-check")
    p.add_argument("--layers", required=True,
                   help="e.g. dense:5:sigmoid:trainable,dense:3:identity:trainable")
    p.add_argument("--input", required=True, help="input shape, e.g. 4 or 1x8x8")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
