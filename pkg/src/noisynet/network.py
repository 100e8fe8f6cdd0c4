"""Noisy feed-forward networks with hand-coded backpropagation.

Layers compute ``x_next = phi(theta . [1, x] + sigma * eps)`` where ``eps``
is a fresh standard-normal draw per neuron (per feature-map element for
conv layers) and ``sigma`` is the per-neuron noise level.  The backward
pass propagates the usual residual errors and, as a byproduct, yields the
pathwise derivative of the loss with respect to every noise level:
``d(loss)/d(sigma_i) = delta_i * eps_i``.  That identity is what makes the
noise levels trainable at the cost of one extra elementwise product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, RngStream, conv2d
from .validation import check_batch, check_labels

CHECKPOINT_VERSION = 1

_NOISE_KINDS = ("none", "fixed", "trainable")
_MODES = ("active", "frozen", "disabled")

# Stream ids carved out of each layer's init stream.
_INIT_STREAM = 0x1A17


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def _sigmoid_deriv(v):
    s = _sigmoid(v)
    return s * (1.0 - s)


# activation -> (function, derivative in terms of the pre-activation).
# The ReLU derivative at exactly 0 is defined as 0 so gradient checks are
# deterministic.
ACTIVATIONS = {
    "relu": (lambda v: np.maximum(v, 0.0), lambda v: (v > 0.0).astype(np.float64)),
    "sigmoid": (_sigmoid, _sigmoid_deriv),
    "identity": (lambda v: v, lambda v: np.ones_like(v)),
}


@dataclass
class LayerSpec:
    """Declarative description of one layer.

    Dense layers use ``fan_in``/``fan_out``; conv layers use
    ``in_channels``/``channels`` (kernel count) with square ``kernel_size``
    filters, stride 1 and zero padding that preserves the spatial size.
    ``pool`` appends a 2x2 max-pool after the activation (conv only).
    """

    kind: str
    fan_in: int = 0
    fan_out: int = 0
    in_channels: int = 0
    channels: int = 0
    kernel_size: int = 3
    activation: str = "identity"
    noise: str = "none"
    sigma_init: float = 1.0
    pool: bool = False

    def validate(self) -> None:
        if self.kind not in ("dense", "conv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.noise not in _NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise!r}")
        if self.noise == "trainable" and not self.sigma_init > 0:
            raise ValueError("trainable noise requires sigma_init > 0")
        if self.kind == "dense":
            if self.fan_in <= 0 or self.fan_out <= 0:
                raise ValueError(f"dense layer needs positive fan_in/fan_out, "
                                 f"got {self.fan_in}/{self.fan_out}")
            if self.pool:
                raise ValueError("pooling applies to conv layers only")
        else:
            if self.in_channels <= 0 or self.channels <= 0:
                raise ValueError("conv layer needs positive channel counts")
            if self.kernel_size % 2 == 0 or self.kernel_size <= 0:
                raise ValueError("conv kernel size must be odd and positive")

    @property
    def units(self) -> int:
        """Number of noise levels carried by this layer."""
        return self.fan_out if self.kind == "dense" else self.channels


@dataclass
class Layer:
    """Parameters of one layer.

    Dense: ``theta`` is (fan_out, fan_in + 1) with the bias folded in as
    column 0 (the constant input x_0 = 1).  Conv: ``theta`` is the kernel
    stack (K, C, k, k) and ``bias`` the per-kernel offset.  ``sigma`` holds
    one noise level per neuron (dense) or per feature map (conv), or None
    when the layer is noise-free.
    """

    theta: np.ndarray
    bias: np.ndarray | None = None
    sigma: np.ndarray | None = None


@dataclass
class NetworkState:
    specs: list[LayerSpec]
    layers: list[Layer]
    input_shape: tuple
    seed: int = 0

    @property
    def n_outputs(self) -> int:
        return self.specs[-1].fan_out if self.specs[-1].kind == "dense" \
            else self.specs[-1].channels

    def has_noise(self) -> bool:
        return any(s.noise != "none" for s in self.specs)

    def trainable_sigma(self) -> bool:
        return any(s.noise == "trainable" for s in self.specs)


@dataclass
class ForwardTrace:
    """Everything the backward pass needs from one forward pass.

    ``noises`` stores exactly the standard-normal draws used, so the pass
    can be replayed (noise_mode="frozen") for common-random-number finite
    differences.
    """

    inputs: list = field(default_factory=list)        # per layer, as consumed
    preacts: list = field(default_factory=list)       # post-noise pre-activations
    noises: list = field(default_factory=list)        # eps draws or None
    pool_masks: list = field(default_factory=list)    # argmax masks or None
    flatten_shapes: list = field(default_factory=list)  # pre-flatten shape or None
    output: np.ndarray | None = None


@dataclass
class LayerGrads:
    theta: np.ndarray
    bias: np.ndarray | None = None
    sigma: np.ndarray | None = None


@dataclass
class GradientBundle:
    """Loss gradients for every layer, averaged over the minibatch.

    ``input_grad`` (present when requested) is the per-sample gradient of
    each sample's own loss term with respect to that sample's input.
    """

    layers: list
    input_grad: np.ndarray | None = None


def validate_composition(specs: list[LayerSpec], input_shape: tuple) -> None:
    """Check that consecutive layer shapes compose from the given input."""
    if not specs:
        raise ValueError("network needs at least one layer")
    shape = tuple(int(s) for s in input_shape)
    for i, spec in enumerate(specs):
        spec.validate()
        if spec.kind == "dense":
            flat = int(np.prod(shape))
            if flat != spec.fan_in:
                raise DimensionError(
                    f"layer {i}: dense fan_in {spec.fan_in} does not match "
                    f"incoming size {flat} (shape {shape})"
                )
            shape = (spec.fan_out,)
        else:
            if len(shape) != 3:
                raise DimensionError(
                    f"layer {i}: conv layer needs (C, H, W) input, got {shape}"
                )
            c, h, w = shape
            if c != spec.in_channels:
                raise DimensionError(
                    f"layer {i}: conv expects {spec.in_channels} channels, got {c}"
                )
            if spec.pool and (h % 2 or w % 2):
                raise DimensionError(
                    f"layer {i}: 2x2 pooling needs even spatial size, got {h}x{w}"
                )
            shape = (spec.channels, h // 2 if spec.pool else h,
                     w // 2 if spec.pool else w)


def build_network(specs: list[LayerSpec], input_shape, seed: int = 0) -> NetworkState:
    """Initialize parameters for the given layer stack.

    Weights use Kaiming scaling for ReLU layers and Xavier/Glorot uniform
    otherwise; biases start at zero; noise levels start at ``sigma_init``.
    The layout is fixed by ``seed`` alone.
    """
    input_shape = tuple(int(s) for s in input_shape)
    validate_composition(specs, input_shape)
    layers = []
    for i, spec in enumerate(specs):
        stream = RngStream(seed, _INIT_STREAM).substream(i)
        if spec.kind == "dense":
            fan_in, fan_out = spec.fan_in, spec.fan_out
            theta = np.zeros((fan_out, fan_in + 1))
            if spec.activation == "relu":
                theta[:, 1:] = stream.standard_normal((fan_out, fan_in)) \
                    * np.sqrt(2.0 / fan_in)
            else:
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                theta[:, 1:] = stream.uniform((fan_out, fan_in), -bound, bound)
            bias = None
        else:
            k, c, ks = spec.channels, spec.in_channels, spec.kernel_size
            fan_in = c * ks * ks
            if spec.activation == "relu":
                theta = stream.standard_normal((k, c, ks, ks)) * np.sqrt(2.0 / fan_in)
            else:
                bound = np.sqrt(6.0 / (fan_in + k * ks * ks))
                theta = stream.uniform((k, c, ks, ks), -bound, bound)
            bias = np.zeros(k)
        sigma = None
        if spec.noise != "none":
            sigma = np.full(spec.units, float(spec.sigma_init))
        layers.append(Layer(theta=theta, bias=bias, sigma=sigma))
    return NetworkState(specs=list(specs), layers=layers,
                        input_shape=input_shape, seed=int(seed))


def _prepare_input(net: NetworkState, batch) -> np.ndarray:
    x = check_batch(np.asarray(batch, dtype=np.float64))
    want = net.input_shape
    if len(want) == 1:
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != want[0]:
            raise DimensionError(
                f"batch features {flat.shape[1]} do not match network input {want[0]}"
            )
        return x
    if x.ndim != 4 or x.shape[1:] != want:
        raise DimensionError(
            f"batch shape {x.shape[1:]} does not match network input {want}"
        )
    return x


def _max_pool2(a: np.ndarray):
    n, k, h, w = a.shape
    win = a.reshape(n, k, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, k, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)              # first max wins: deterministic
    pooled = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    mask = np.zeros_like(win)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
    mask = mask.reshape(n, k, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return pooled, mask.reshape(n, k, h, w)


def _max_unpool2(g: np.ndarray, mask: np.ndarray) -> np.ndarray:
    up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
    return up * mask


def forward(net: NetworkState, batch, noise_mode: str = "active",
            rng: RngStream | None = None,
            trace: ForwardTrace | None = None):
    """Run the network, returning (output logits, trace).

    noise_mode:
      - "active": draw fresh eps from ``rng`` for every noisy layer.
      - "frozen": replay the eps stored in ``trace`` (common random numbers).
      - "disabled": no noise injected; the pass is deterministic.
    """
    if noise_mode not in _MODES:
        raise ValueError(f"unknown noise_mode {noise_mode!r}")
    if noise_mode == "frozen" and trace is None:
        raise ValueError("frozen mode needs the trace of a prior forward pass")
    if noise_mode == "active" and rng is None and net.has_noise():
        raise ValueError("active mode needs an RngStream for the noise draws")

    x = _prepare_input(net, batch)
    out = ForwardTrace()
    for t, (spec, layer) in enumerate(zip(net.specs, net.layers)):
        flat_shape = None
        if spec.kind == "dense" and x.ndim > 2:
            flat_shape = x.shape
            x = x.reshape(x.shape[0], -1)
        out.flatten_shapes.append(flat_shape)
        out.inputs.append(x)

        if spec.kind == "dense":
            v = x @ layer.theta[:, 1:].T + layer.theta[:, 0]
        else:
            v = conv2d(x, layer.theta, stride=1, pad=spec.kernel_size // 2)
            v += layer.bias[None, :, None, None]

        eps = None
        if spec.noise != "none" and noise_mode != "disabled":
            if noise_mode == "frozen":
                eps = trace.noises[t]
                if eps is not None and eps.shape != v.shape:
                    raise DimensionError(
                        f"layer {t}: frozen noise shape {eps.shape} does not "
                        f"match pre-activation shape {v.shape}"
                    )
            else:
                eps = rng.standard_normal(v.shape)
            if eps is not None:
                if spec.kind == "dense":
                    v = v + layer.sigma * eps
                else:
                    v = v + layer.sigma[None, :, None, None] * eps
        out.noises.append(eps)
        out.preacts.append(v)

        phi = ACTIVATIONS[spec.activation][0]
        x = phi(v)

        mask = None
        if spec.kind == "conv" and spec.pool:
            x, mask = _max_pool2(x)
        out.pool_masks.append(mask)

    out.output = x
    return x, out


def cross_entropy_loss(logits, labels):
    """Softmax cross-entropy averaged over the batch.

    Returns (loss, e) where e[n] is the gradient of sample n's loss term
    with respect to that sample's logits (softmax minus one-hot), i.e. the
    seed of the backward recursion.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (n, classes), got {logits.shape}")
    labels = check_labels(labels, n_classes=logits.shape[1], name="labels")
    if labels.shape[0] != logits.shape[0]:
        raise DimensionError(
            f"{logits.shape[0]} logit rows but {labels.shape[0]} labels"
        )
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = m[:, 0] + np.log(np.exp(shifted).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(lse - logits[np.arange(n), labels]))
    e = np.exp(shifted - (lse - m[:, 0])[:, None])
    e[np.arange(n), labels] -= 1.0
    return loss, e


def backward(net: NetworkState, trace: ForwardTrace, e,
             want_input_grad: bool = False) -> GradientBundle:
    """Backpropagate residual errors and collect all parameter gradients.

    For every layer the residual error delta is the loss sensitivity of the
    post-noise pre-activation; the weight gradient is delta x input, and the
    noise-level gradient is delta x eps (summed over spatial positions for
    conv feature maps).  All parameter gradients are averaged over the
    batch.  When the trace holds no noise draws for a layer, its dsigma is
    zero.
    """
    e = np.asarray(e, dtype=np.float64)
    n = e.shape[0]
    if len(trace.preacts) != len(net.specs):
        raise DimensionError("trace does not match the network depth")
    if e.shape != trace.output.shape:
        raise DimensionError(
            f"e shape {e.shape} does not match output shape {trace.output.shape}"
        )

    grads: list[LayerGrads | None] = [None] * len(net.specs)
    g = e
    input_grad = None
    for t in range(len(net.specs) - 1, -1, -1):
        spec, layer = net.specs[t], net.layers[t]
        v = trace.preacts[t]
        x = trace.inputs[t]
        eps = trace.noises[t]

        if spec.kind == "conv" and spec.pool:
            g = _max_unpool2(g, trace.pool_masks[t])

        dphi = ACTIVATIONS[spec.activation][1]
        delta = g * dphi(v)

        if spec.kind == "dense":
            dtheta = np.empty_like(layer.theta)
            dtheta[:, 0] = delta.mean(axis=0)
            dtheta[:, 1:] = delta.T @ x / n
            dbias = None
            dsigma = None
            if layer.sigma is not None:
                dsigma = (delta * eps).mean(axis=0) if eps is not None \
                    else np.zeros_like(layer.sigma)
            if t > 0 or want_input_grad:
                g = delta @ layer.theta[:, 1:]
                if trace.flatten_shapes[t] is not None:
                    g = g.reshape(trace.flatten_shapes[t])
        else:
            pad = spec.kernel_size // 2
            xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            win = sliding_window_view(xp, (spec.kernel_size, spec.kernel_size),
                                      axis=(2, 3))
            dtheta = np.einsum("nchwpq,nkhw->kcpq", win, delta, optimize=True) / n
            dbias = delta.sum(axis=(2, 3)).mean(axis=0)
            dsigma = None
            if layer.sigma is not None:
                dsigma = (delta * eps).sum(axis=(2, 3)).mean(axis=0) \
                    if eps is not None else np.zeros_like(layer.sigma)
            if t > 0 or want_input_grad:
                flipped = layer.theta.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
                g = conv2d(delta, flipped, stride=1, pad=pad)

        grads[t] = LayerGrads(theta=dtheta, bias=dbias, sigma=dsigma)
        if t == 0 and want_input_grad:
            input_grad = g

    return GradientBundle(layers=grads, input_grad=input_grad)


def predict(net: NetworkState, batch, noise_mode: str = "disabled",
            rng: RngStream | None = None) -> np.ndarray:
    """Class indices per row; ties break toward the lowest class index."""
    logits, _ = forward(net, batch, noise_mode=noise_mode, rng=rng)
    return np.argmax(logits, axis=1)


def loss_input_gradient(net: NetworkState, batch, labels,
                        noise_mode: str = "disabled",
                        rng: RngStream | None = None,
                        trace: ForwardTrace | None = None):
    """Per-sample gradient of the cross-entropy loss w.r.t. the input.

    Returns (loss, gradient, trace); reusing the returned trace with
    noise_mode="frozen" re-evaluates under the identical noise draws.
    """
    logits, tr = forward(net, batch, noise_mode=noise_mode, rng=rng, trace=trace)
    loss, e = cross_entropy_loss(logits, labels)
    bundle = backward(net, tr, e, want_input_grad=True)
    return loss, bundle.input_grad, tr


def input_gradient(net: NetworkState, x, class_index,
                   noise_mode: str = "disabled",
                   rng: RngStream | None = None) -> np.ndarray:
    """Gradient of the class score (logit) with respect to the input pixels."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == len(net.input_shape)
    batch = x[None] if squeeze else x
    logits, tr = forward(net, batch, noise_mode=noise_mode, rng=rng)
    n, n_out = logits.shape
    cls = np.full(n, class_index, dtype=np.int64) if np.isscalar(class_index) \
        else check_labels(class_index, name="class_index")
    if cls.min() < 0 or cls.max() >= n_out:
        raise ValueError(f"class index out of range [0, {n_out})")
    e = np.zeros_like(logits)
    e[np.arange(n), cls] = 1.0
    bundle = backward(net, tr, e, want_input_grad=True)
    grad = bundle.input_grad
    return grad[0] if squeeze else grad


# --- checkpoint container -------------------------------------------------
#
# A checkpoint is a numpy .npz archive with a JSON header under the key
# "meta" (version, seed, input shape, layer specs, free-form extra) and one
# float64 array per parameter tensor.  float64 arrays round-trip bit-exactly.

def _spec_to_dict(spec: LayerSpec) -> dict:
    return asdict(spec)


def save_checkpoint(path, net: NetworkState, optimizer_arrays: dict | None = None,
                    extra: dict | None = None) -> None:
    meta = {
        "format": "noisynet-checkpoint",
        "version": CHECKPOINT_VERSION,
        "seed": net.seed,
        "input_shape": list(net.input_shape),
        "specs": [_spec_to_dict(s) for s in net.specs],
        "extra": extra or {},
        "optimizer_keys": sorted(optimizer_arrays) if optimizer_arrays else [],
    }
    arrays = {"meta": np.str_(json.dumps(meta, sort_keys=True))}
    for i, layer in enumerate(net.layers):
        arrays[f"layer{i}_theta"] = layer.theta
        if layer.bias is not None:
            arrays[f"layer{i}_bias"] = layer.bias
        if layer.sigma is not None:
            arrays[f"layer{i}_sigma"] = layer.sigma
    for key, arr in (optimizer_arrays or {}).items():
        arrays[f"opt_{key}"] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Load a checkpoint; returns (NetworkState, optimizer_arrays, extra)."""
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("format") != "noisynet-checkpoint":
            raise ValueError(f"{path} is not a noisynet checkpoint")
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        specs = [LayerSpec(**d) for d in meta["specs"]]
        layers = []
        for i, spec in enumerate(specs):
            theta = archive[f"layer{i}_theta"]
            bias = archive[f"layer{i}_bias"] if f"layer{i}_bias" in archive else None
            sigma = archive[f"layer{i}_sigma"] if f"layer{i}_sigma" in archive else None
            layers.append(Layer(theta=theta, bias=bias, sigma=sigma))
        net = NetworkState(specs=specs, layers=layers,
                           input_shape=tuple(meta["input_shape"]),
                           seed=meta["seed"])
        opt = {key: archive[f"opt_{key}"] for key in meta["optimizer_keys"]}
        return net, opt, meta["extra"]
