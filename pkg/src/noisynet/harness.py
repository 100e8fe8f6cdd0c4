"""Training and evaluation orchestration.

Implements the joint weight/noise-level training loop (forward with noise,
loss, backward for both gradient families, Adam step for weights, projected
Adam step for noise levels), the evaluation campaign over attacks and
corruptions, and a finite-difference gradient self-check.
"""

from __future__ import annotations

import csv
import os
import re
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import corruptions as corruptions_mod
from .attacks import AttackConfig, run_attack, transfer_attack
from .corruptions import corruption_accuracy
from .data import Dataset, load_dataset, load_mnist, render_digits, split, \
    synthetic_blobs
from .network import LayerSpec, NetworkState, backward, build_network, \
    cross_entropy_loss, forward, predict, save_checkpoint
from .optim import Adam, step_decay
from .tensor import RngStream

CSV_SCHEMA_VERSION = 1

# Table-style evaluation order: clean, white-box attacks, corruption means,
# transfer attacks.
EVAL_ORDER = ("clean", "fgsm", "lbfgs", "pgd",
              "gaussian", "impulse", "glass_blur", "contrast",
              "transfer_fgsm", "transfer_lbfgs")

_EVAL_STREAM = {name: i + 1 for i, name in enumerate(EVAL_ORDER)}

# Private stream ids under the run seed.
_SHUFFLE, _NOISE, _VAL, _TEST, _SUBSET, _GRADCHECK = range(0x50, 0x56)

PRESETS = ("mlp", "mlp_plus", "mlp_n", "cnn", "cnn_mlp_plus", "cnn_a_plus",
           "cnn_mlp_n", "cnn_a_n", "mlp_surrogate")

# Per-dataset attack settings.  The cifar10 FGSM step size inherits the
# mnist value; it is not pinned by the evaluation protocol and stays
# configurable.
ATTACK_PRESETS = {
    "mnist": {
        "fgsm": dict(alpha=0.1),
        "pgd": dict(alpha=5 / 255, eps=25 / 255, steps=10),
        "lbfgs": dict(alpha=0.5, steps=10),
    },
    "cifar10": {
        "fgsm": dict(alpha=0.1),
        "pgd": dict(alpha=2 / 255, eps=8 / 255, steps=5),
        "lbfgs": dict(alpha=5e-2, steps=20),
    },
    "tiny_imagenet": {
        "fgsm": dict(alpha=2 / 255),
        "pgd": dict(alpha=2 / 255, eps=5 / 255, steps=3),
        "lbfgs": dict(alpha=5e-2, steps=10),
    },
}


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class MissingSurrogateError(ValueError):
    pass


def _dense(fan_in, fan_out, activation, noise, sigma_init=1.0):
    return LayerSpec(kind="dense", fan_in=fan_in, fan_out=fan_out,
                     activation=activation, noise=noise, sigma_init=sigma_init)


def _conv(cin, k, activation, noise, sigma_init=1.0, pool=True):
    return LayerSpec(kind="conv", in_channels=cin, channels=k,
                     activation=activation, noise=noise,
                     sigma_init=sigma_init, pool=pool)


def preset_specs(preset: str, input_shape, n_classes: int,
                 activation: str = "sigmoid",
                 sigma_init: float = 1.0) -> list[LayerSpec]:
    """Layer stacks for the ablation presets.

    mlp / mlp_plus / mlp_n: 100/50 hidden units with no noise, fixed
    unit-variance noise, or trainable noise on every layer.  cnn variants:
    two 3x3 conv layers (32 and 64 kernels, each with 2x2 pooling), a
    128-unit dense layer and the output layer; the *_mlp_* variants add
    noise to the dense layers only, *_a_* to conv and dense layers.
    mlp_surrogate is the 300/150 ReLU stack used to generate transfer
    attacks.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (choose from {PRESETS})")
    flat = int(np.prod(input_shape))
    if preset.startswith("mlp"):
        if preset == "mlp_surrogate":
            return [_dense(flat, 300, "relu", "none"),
                    _dense(300, 150, "relu", "none"),
                    _dense(150, n_classes, "identity", "none")]
        noise = {"mlp": "none", "mlp_plus": "fixed", "mlp_n": "trainable"}[preset]
        return [_dense(flat, 100, activation, noise, sigma_init),
                _dense(100, 50, activation, noise, sigma_init),
                _dense(50, n_classes, "identity", noise, sigma_init)]

    if len(input_shape) != 3:
        raise ConfigError(f"{preset} needs (C, H, W) input, got {input_shape}")
    c, h, w = (int(v) for v in input_shape)
    if h % 4 or w % 4:
        raise ConfigError(f"{preset} pools twice; spatial size {h}x{w} "
                          f"must be divisible by 4")
    conv_noise = "none"
    dense_noise = "none"
    if preset in ("cnn_mlp_plus", "cnn_a_plus"):
        dense_noise = "fixed"
    if preset in ("cnn_mlp_n", "cnn_a_n"):
        dense_noise = "trainable"
    if preset == "cnn_a_plus":
        conv_noise = "fixed"
    if preset == "cnn_a_n":
        conv_noise = "trainable"
    flat_out = 64 * (h // 4) * (w // 4)
    return [_conv(c, 32, "relu", conv_noise, sigma_init),
            _conv(32, 64, "relu", conv_noise, sigma_init),
            _dense(flat_out, 128, "relu", dense_noise, sigma_init),
            _dense(128, n_classes, "identity", dense_noise, sigma_init)]


@dataclass
class RunConfig:
    """Training-run description; every field maps to a config-file key."""

    # data.*
    dataset: str = "blobs"        # mnist | digits | blobs | container
    data_dir: str = "data"
    data_path: str = ""
    subset: int = 0               # cap the pooled dataset (0 = use all)
    samples_per_class: int = 200  # synthetic corpora
    blob_dim: int = 16
    split_train: int = 5
    split_val: int = 1
    split_test: int = 1
    # model.*
    preset: str = "mlp"
    activation: str = "sigmoid"
    sigma_init: float = 1.0
    # optim.*
    lr: float = 1e-3
    weight_decay: float = 1e-4
    sigma_lr: float = 1e-3
    lr_decay_factor: float = 1.0
    lr_decay_every: int = 0
    # train.*
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    out_dir: str = "runs"
    name: str = ""
    # eval.*
    eval_noise: str = "auto"      # auto | active | disabled
    attack_family: str = "mnist"  # which ATTACK_PRESETS row applies

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.eval_noise not in ("auto", "active", "disabled"):
            raise ConfigError(f"bad eval_noise {self.eval_noise!r}")
        if self.attack_family not in ATTACK_PRESETS:
            raise ConfigError(f"unknown attack family {self.attack_family!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")

    def run_name(self) -> str:
        return self.name or f"{self.preset}_{self.activation}_seed{self.seed}"


_SECTIONS = {
    "data": ("dataset", "data_dir", "data_path", "subset", "samples_per_class",
             "blob_dim", "split_train", "split_val", "split_test"),
    "model": ("preset", "activation", "sigma_init"),
    "optim": ("lr", "weight_decay", "sigma_lr", "lr_decay_factor",
              "lr_decay_every"),
    "train": ("epochs", "batch_size", "seed", "out_dir", "name"),
    "eval": ("eval_noise", "attack_family"),
}

_KEY_TO_FIELD = {f"{sec}.{name}": name
                 for sec, names in _SECTIONS.items() for name in names}

_LINE_RE = re.compile(r"^\s*([a-z_]+\.[a-z_]+)\s*=\s*(.*?)\s*$")


def parse_config_file(path) -> dict:
    """Parse the flat `section.key = value` grammar; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            m = _LINE_RE.match(stripped)
            if not m:
                raise ConfigError(f"{path}:{lineno}: cannot parse {line.rstrip()!r}")
            key, value = m.group(1), m.group(2)
            if key not in _KEY_TO_FIELD:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value
    return values


def env_overrides(environ) -> dict:
    """NOISY_<SECTION>_<KEY> environment variables override file values."""
    values = {}
    for sec, names in _SECTIONS.items():
        for name in names:
            env_key = f"NOISY_{sec.upper()}_{name.upper()}"
            if env_key in environ:
                values[f"{sec}.{name}"] = environ[env_key]
    return values


def build_run_config(file_values: dict | None = None,
                     environ: dict | None = None,
                     overrides: dict | None = None) -> RunConfig:
    """Merge config sources (file < environment < explicit overrides)."""
    merged = dict(file_values or {})
    merged.update(env_overrides(environ or os.environ))
    cfg = RunConfig()
    types = {f.name: type(getattr(cfg, f.name)) for f in fields(cfg)}
    kwargs = {}
    for key, raw in merged.items():
        name = _KEY_TO_FIELD[key]
        kind = types[name]
        try:
            kwargs[name] = kind(raw) if kind is not bool else raw.lower() == "true"
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    for name, value in (overrides or {}).items():
        if value is not None:
            kwargs[name] = value
    cfg = replace(cfg, **kwargs)
    cfg.validate()
    return cfg


@dataclass
class EvalRow:
    model: str
    eval_id: str
    params: str
    accuracy: float


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    test_accuracy: float


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    curves: list = field(default_factory=list)

    def write_rows_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["schema", "model", "eval", "params", "accuracy"])
            for row in self.rows:
                writer.writerow([CSV_SCHEMA_VERSION, row.model, row.eval_id,
                                 row.params, f"{row.accuracy:.17g}"])

    def write_curves_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["schema", "epoch", "train_loss", "val_loss",
                             "test_accuracy"])
            for c in self.curves:
                writer.writerow([CSV_SCHEMA_VERSION, c.epoch,
                                 f"{c.train_loss:.17g}", f"{c.val_loss:.17g}",
                                 f"{c.test_accuracy:.17g}"])


def load_run_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "mnist":
        return load_mnist(cfg.data_dir)
    if cfg.dataset == "digits":
        return render_digits(cfg.samples_per_class, seed=cfg.seed)
    if cfg.dataset == "blobs":
        return synthetic_blobs(classes=4, samples_per_class=cfg.samples_per_class,
                               dim=cfg.blob_dim, seed=cfg.seed)
    if cfg.dataset == "container":
        if not cfg.data_path:
            raise ConfigError("dataset=container needs data.data_path")
        return load_dataset(cfg.data_path)
    raise ConfigError(f"unknown dataset {cfg.dataset!r}")


def _theta_params(net: NetworkState):
    """Weight tensors in a fixed order: theta then conv bias per layer."""
    params, setters = [], []
    for i, layer in enumerate(net.layers):
        params.append(layer.theta)
        setters.append((i, "theta"))
        if layer.bias is not None:
            params.append(layer.bias)
            setters.append((i, "bias"))
    return params, setters


def _theta_grads(net: NetworkState, bundle):
    grads = []
    for layer, lg in zip(net.layers, bundle.layers):
        grads.append(lg.theta)
        if layer.bias is not None:
            grads.append(lg.bias)
    return grads


def _sigma_layers(net: NetworkState):
    return [i for i, spec in enumerate(net.specs) if spec.noise == "trainable"]


def eval_noise_mode(net: NetworkState, setting: str = "auto") -> str:
    if setting == "auto":
        return "active" if net.has_noise() else "disabled"
    return setting


def accuracy(net: NetworkState, images, labels, noise_mode: str,
             rng: RngStream | None = None, batch_size: int = 512) -> float:
    correct = 0
    for start in range(0, len(images), batch_size):
        preds = predict(net, images[start:start + batch_size],
                        noise_mode=noise_mode, rng=rng)
        correct += int((preds == labels[start:start + batch_size]).sum())
    return correct / len(images)


def mean_loss(net: NetworkState, images, labels, noise_mode: str,
              rng: RngStream | None = None, batch_size: int = 512) -> float:
    total = 0.0
    for start in range(0, len(images), batch_size):
        xb = images[start:start + batch_size]
        logits, _ = forward(net, xb, noise_mode=noise_mode, rng=rng)
        loss, _ = cross_entropy_loss(logits, labels[start:start + batch_size])
        total += loss * len(xb)
    return total / len(images)


def fit_network(net: NetworkState, images, labels, *, epochs: int,
                batch_size: int, lr: float, weight_decay: float,
                sigma_lr: float, seed: int, lr_decay_factor: float = 1.0,
                lr_decay_every: int = 0, epoch_callback=None) -> list:
    """Run the joint training loop in place; returns per-epoch train losses.

    Per batch: noisy forward, cross-entropy, backward for the weight and
    noise-level gradients, Adam step on weights (with L2 decay), projected
    Adam step on trainable noise levels.
    """
    root = RngStream(seed)
    theta_opt = Adam(lr=lr, weight_decay=weight_decay)
    sigma_idx = _sigma_layers(net)
    sigma_opt = Adam(lr=sigma_lr, project="abs") if sigma_idx else None
    train_mode = "active" if net.has_noise() else "disabled"
    n = len(images)
    losses = []
    for epoch in range(epochs):
        theta_opt.lr = step_decay(lr, lr_decay_factor, lr_decay_every, epoch)
        perm = root.substream(_SHUFFLE, epoch).permutation(n)
        epoch_loss = 0.0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = perm[start:start + batch_size]
            xb, yb = images[idx], labels[idx]
            noise_rng = root.substream(_NOISE, epoch, b)
            logits, trace = forward(net, xb, train_mode, rng=noise_rng)
            loss, e = cross_entropy_loss(logits, yb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {b}"
                )
            bundle = backward(net, trace, e)
            params, setters = _theta_params(net)
            updated = theta_opt.step(params, _theta_grads(net, bundle))
            for (i, attr), new in zip(setters, updated):
                setattr(net.layers[i], attr, new)
            if sigma_opt:
                sigmas = [net.layers[i].sigma for i in sigma_idx]
                dsigmas = [bundle.layers[i].sigma for i in sigma_idx]
                for i, new in zip(sigma_idx, sigma_opt.step(sigmas, dsigmas)):
                    net.layers[i].sigma = new
            epoch_loss += loss * len(xb)
        losses.append(epoch_loss / n)
        if epoch_callback is not None:
            opts = {"theta": theta_opt, "sigma": sigma_opt}
            epoch_callback(epoch, losses[-1], opts)
    return losses


def train(cfg: RunConfig, dataset: Dataset | None = None):
    """Full training run: load, split, fit, log curves, checkpoint.

    Returns (net, MetricsReport, checkpoint_path).  With epochs=0 the
    initialized network is checkpointed and the curves are empty.
    """
    cfg.validate()
    ds = dataset if dataset is not None else load_run_dataset(cfg)
    if cfg.subset and cfg.subset < len(ds):
        perm = RngStream(cfg.seed, _SUBSET).permutation(len(ds))
        ds = ds.subset(perm[:cfg.subset])
    train_ds, val_ds, test_ds = split(
        ds, (cfg.split_train, cfg.split_val, cfg.split_test), seed=cfg.seed)

    input_shape = (ds.images.shape[1] * ds.images.shape[2] * ds.images.shape[3],) \
        if cfg.preset.startswith("mlp") else ds.images.shape[1:]
    specs = preset_specs(cfg.preset, input_shape, ds.n_classes,
                         activation=cfg.activation, sigma_init=cfg.sigma_init)
    net = build_network(specs, input_shape, seed=cfg.seed)

    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_path = os.path.join(cfg.out_dir, cfg.run_name() + ".ckpt.npz")
    report = MetricsReport()
    root = RngStream(cfg.seed)
    train_mode = "active" if net.has_noise() else "disabled"
    eval_mode = eval_noise_mode(net, cfg.eval_noise)

    base_extra = {"name": cfg.run_name(), "preset": cfg.preset,
                  "dataset": ds.name, "run_config": asdict(cfg)}

    def on_epoch(epoch, train_loss, opts):
        val_loss = mean_loss(net, val_ds.images, val_ds.labels, train_mode,
                             rng=root.substream(_VAL, epoch))
        test_acc = accuracy(net, test_ds.images, test_ds.labels, eval_mode,
                            rng=root.substream(_TEST, epoch))
        report.curves.append(EpochStats(epoch, train_loss, val_loss, test_acc))
        arrays = opts["theta"].state_arrays("theta")
        if opts["sigma"]:
            arrays.update(opts["sigma"].state_arrays("sigma"))
        save_checkpoint(ckpt_path, net, optimizer_arrays=arrays,
                        extra={**base_extra, "epoch": epoch})

    fit_network(net, train_ds.images, train_ds.labels, epochs=cfg.epochs,
                batch_size=cfg.batch_size, lr=cfg.lr,
                weight_decay=cfg.weight_decay, sigma_lr=cfg.sigma_lr,
                seed=cfg.seed, lr_decay_factor=cfg.lr_decay_factor,
                lr_decay_every=cfg.lr_decay_every, epoch_callback=on_epoch)
    if cfg.epochs == 0:
        save_checkpoint(ckpt_path, net, extra={**base_extra, "epoch": -1})
    report.write_curves_csv(os.path.join(cfg.out_dir,
                                         cfg.run_name() + "_curves.csv"))
    return net, report, ckpt_path


def attack_config(kind: str, family: str = "mnist", seed: int = 0,
                  **overrides) -> AttackConfig:
    base = dict(ATTACK_PRESETS[family][kind])
    base.update(overrides)
    return AttackConfig(kind=kind, seed=seed, **base)


def _params_str(cfg: AttackConfig) -> str:
    parts = [f"alpha={cfg.alpha:g}"]
    if cfg.kind == "pgd":
        parts.append(f"eps={cfg.eps:g}")
    if cfg.kind in ("pgd", "lbfgs"):
        parts.append(f"steps={cfg.steps}")
    return ";".join(parts)


def evaluate(net: NetworkState, test_ds: Dataset, suite=EVAL_ORDER,
             surrogate: NetworkState | None = None, seed: int = 0,
             eval_noise: str = "auto", family: str = "mnist",
             model_id: str = "model", batch_size: int = 256) -> MetricsReport:
    """One accuracy row per suite entry, in the requested order.

    Row seeds derive from the entry identity, so results do not depend on
    evaluation order or worker scheduling.
    """
    if not suite:
        raise ValueError("empty evaluation suite")
    if len(test_ds) == 0:
        raise ValueError("empty dataset")
    mode = eval_noise_mode(net, eval_noise)
    report = MetricsReport()
    images, labels = test_ds.images, test_ds.labels
    for entry in suite:
        if entry not in _EVAL_STREAM:
            raise ValueError(f"unknown evaluation entry {entry!r}")
        row_seed = RngStream(seed, _EVAL_STREAM[entry]).substream(0).stream_id
        if entry == "clean":
            acc = accuracy(net, images, labels, mode,
                           rng=RngStream(row_seed, 0xE7A1),
                           batch_size=batch_size)
            report.rows.append(EvalRow(model_id, entry, "", acc))
            continue
        if entry in corruptions_mod.KINDS:
            _, mean_acc = corruption_accuracy(net, test_ds, entry,
                                              seed=row_seed, noise_mode=mode,
                                              batch_size=batch_size)
            report.rows.append(EvalRow(model_id, entry, "severities=1-5",
                                       mean_acc))
            continue
        transfer = entry.startswith("transfer_")
        kind = entry.removeprefix("transfer_")
        if transfer and surrogate is None:
            raise MissingSurrogateError(
                f"evaluation entry {entry!r} needs a surrogate network"
            )
        correct = 0
        cfg0 = attack_config(kind, family, seed=row_seed)
        for b, start in enumerate(range(0, len(images), batch_size)):
            xb = images[start:start + batch_size]
            yb = labels[start:start + batch_size]
            cfg = replace(cfg0, seed=RngStream(row_seed, b).stream_id)
            if transfer:
                _, acc_b = transfer_attack(surrogate, net, xb, yb, cfg,
                                           eval_noise_mode=mode)
                correct += int(round(acc_b * len(xb)))
            else:
                adv = run_attack(net, xb, yb, cfg)
                preds = predict(net, adv, noise_mode=mode,
                                rng=RngStream(cfg.seed, 0xE7A1))
                correct += int((preds == yb).sum())
        report.rows.append(EvalRow(model_id, entry, _params_str(cfg0),
                                   correct / len(images)))
    return report


@dataclass
class GradCheckEntry:
    layer: int
    param: str
    max_abs_diff: float
    max_scaled_error: float


@dataclass
class GradCheckReport:
    entries: list
    tolerance: float
    passed: bool
    max_scaled_error: float

    def summary(self) -> str:
        lines = [f"{'layer':>5} {'param':>6} {'max|g-fd|':>12} {'scaled':>12}"]
        for e in self.entries:
            lines.append(f"{e.layer:>5} {e.param:>6} {e.max_abs_diff:>12.3e} "
                         f"{e.max_scaled_error:>12.3e}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"max scaled error {self.max_scaled_error:.3e} "
                     f"(tolerance {self.tolerance:g}): {verdict}")
        return "\n".join(lines)


def gradcheck(specs: list[LayerSpec], input_shape, seed: int = 0,
              tolerance: float = 1e-4, h: float = 1e-5, batch: int = 3,
              atol: float = 1e-7, backward_fn=backward) -> GradCheckReport:
    """Compare every analytic gradient coordinate against central finite
    differences of the loss under frozen noise draws.

    The scaled error is |g - fd| / max(|fd|, atol/tolerance), so the check
    passes coordinate-wise iff |g - fd| <= max(atol, tolerance * |fd|).
    """
    if len(specs) > 4:
        raise ValueError("gradcheck supports architectures up to 4 layers")
    net = build_network(specs, input_shape, seed=seed)
    stream = RngStream(seed, _GRADCHECK)
    x = stream.uniform((batch, *net.input_shape))
    y = stream.integers(0, net.n_outputs, (batch,))
    mode = "active" if net.has_noise() else "disabled"
    logits, trace = forward(net, x, mode, rng=stream.substream(1))
    _, e = cross_entropy_loss(logits, y)
    bundle = backward_fn(net, trace, e)

    def loss_now() -> float:
        out, _ = forward(net, x, "frozen", trace=trace)
        return cross_entropy_loss(out, y)[0]

    floor = atol / tolerance
    entries = []
    worst = 0.0
    for i, layer in enumerate(net.layers):
        pairs = [("theta", layer.theta, bundle.layers[i].theta)]
        if layer.bias is not None:
            pairs.append(("bias", layer.bias, bundle.layers[i].bias))
        if layer.sigma is not None:
            pairs.append(("sigma", layer.sigma, bundle.layers[i].sigma))
        for name, param, grad in pairs:
            flat = param.reshape(-1)
            gflat = grad.reshape(-1)
            max_abs = 0.0
            max_scaled = 0.0
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = loss_now()
                flat[j] = orig - h
                down = loss_now()
                flat[j] = orig
                fd = (up - down) / (2.0 * h)
                diff = abs(gflat[j] - fd)
                max_abs = max(max_abs, diff)
                max_scaled = max(max_scaled, diff / max(abs(fd), floor))
            entries.append(GradCheckEntry(i, name, max_abs, max_scaled))
            worst = max(worst, max_scaled)
    return GradCheckReport(entries=entries, tolerance=tolerance,
                           passed=worst <= tolerance, max_scaled_error=worst)
