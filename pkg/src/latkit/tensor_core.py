"""Fixed small CNN: forward pass, softmax cross-entropy and hand-written backprop.

Images are NHWC float arrays. The network is

    conv(k1, f1, same) -> ReLU -> maxpool 2x2
    conv(k2, f2, same) -> ReLU -> maxpool 2x2
    dense(units) -> ReLU -> dense(num_classes)

Convolution kernels are stored as (kh, kw, c_in, c_out). Everything is computed
in the dtype of the model parameters, so a float64 copy of a model gives a
float64 network for gradient checking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from latkit import _kernels as K
from latkit.errors import InputError, StructuralError

PARAM_NAMES = (
    "conv1_w",
    "conv1_b",
    "conv2_w",
    "conv2_b",
    "dense_w",
    "dense_b",
    "out_w",
    "out_b",
)

GradientBundle = dict  # name -> ndarray, shaped like Model.params


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple = (28, 28, 1)
    num_classes: int = 10
    conv1_kernel: int = 5
    conv1_filters: int = 32
    conv2_kernel: int = 5
    conv2_filters: int = 64
    dense_units: int = 1024

    def __post_init__(self):
        h, w, c = self.input_shape
        if h % 4 or w % 4:
            raise StructuralError(f"input height/width must be divisible by 4, got {h}x{w}")
        for k in (self.conv1_kernel, self.conv2_kernel):
            if k < 1 or k % 2 == 0:
                raise StructuralError(f"kernel size must be odd and positive, got {k}")
        if min(c, self.num_classes, self.conv1_filters, self.conv2_filters, self.dense_units) < 1:
            raise StructuralError("all layer widths must be positive")

    @property
    def flat_features(self) -> int:
        h, w, _ = self.input_shape
        return (h // 4) * (w // 4) * self.conv2_filters

    def param_shapes(self) -> dict:
        c = self.input_shape[2]
        return {
            "conv1_w": (self.conv1_kernel, self.conv1_kernel, c, self.conv1_filters),
            "conv1_b": (self.conv1_filters,),
            "conv2_w": (self.conv2_kernel, self.conv2_kernel, self.conv1_filters, self.conv2_filters),
            "conv2_b": (self.conv2_filters,),
            "dense_w": (self.flat_features, self.dense_units),
            "dense_b": (self.dense_units,),
            "out_w": (self.dense_units, self.num_classes),
            "out_b": (self.num_classes,),
        }


MNIST_ARCH = Architecture((28, 28, 1))
CIFAR10_ARCH = Architecture((32, 32, 3))


@dataclass(frozen=True, eq=False)
class Model:
    """Parameters plus the architecture they belong to. Treat as immutable."""

    arch: Architecture
    params: dict = field(repr=False)

    def __post_init__(self):
        expected = self.arch.param_shapes()
        if set(self.params) != set(expected):
            raise StructuralError(f"parameter names {sorted(self.params)} != {sorted(expected)}")
        for name, shape in expected.items():
            got = np.shape(self.params[name])
            if got != shape:
                raise StructuralError(f"{name}: expected shape {shape}, got {got}")

    @property
    def input_shape(self) -> tuple:
        return self.arch.input_shape

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    @property
    def dtype(self):
        return self.params["conv1_w"].dtype

    def astype(self, dtype) -> "Model":
        return Model(self.arch, {k: np.asarray(v, dtype=dtype) for k, v in self.params.items()})

    def replace(self, **params) -> "Model":
        new = dict(self.params)
        new.update(params)
        return Model(self.arch, new)


@dataclass(frozen=True, eq=False)
class LinearModel:
    """Softmax regression on the flattened pixels, ``logits = x @ weights + bias``.

    Small enough to optimize by brute force, so attacks can be checked against
    exhaustive search. Accepted wherever the forward/gradient functions take a model.
    """

    weights: np.ndarray  # (H * W * C, num_classes)
    bias: np.ndarray
    input_shape: tuple

    def __post_init__(self):
        d = int(np.prod(self.input_shape))
        if np.shape(self.weights) != (d, np.shape(self.bias)[0]):
            raise StructuralError(f"weights {np.shape(self.weights)} do not map {d} pixels to "
                                  f"{np.shape(self.bias)[0]} classes")

    @property
    def num_classes(self) -> int:
        return int(np.shape(self.bias)[0])

    @property
    def dtype(self):
        return np.asarray(self.weights).dtype


def _truncated_normal(rng, shape, stddev):
    # resample anything beyond two standard deviations
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * stddev


def init_model(arch: Architecture = MNIST_ARCH, seed: int = 0, stddev: float = 0.1,
               bias: float = 0.1, dtype=np.float32) -> Model:
    """Truncated-normal weights, constant biases, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("_b"):
            params[name] = np.full(shape, bias, dtype=dtype)
        else:
            params[name] = _truncated_normal(rng, shape, stddev).astype(dtype)
    return Model(arch, params)


# ---------------------------------------------------------------------------
# layer kernels


def _im2col(x, k):
    """(N, H, W, C) -> (N*H*W, k*k*C), same padding, columns ordered (kh, kw, c)."""
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, H, W, C, k, k)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def _conv_relu(x, w, b):
    k = w.shape[0]
    cols = _im2col(x, k)
    r = cols @ _kernel_matrix(w)
    r += b
    np.maximum(r, 0, out=r)
    return cols, r


def _kernel_matrix(w):
    kh, kw, cin, cout = w.shape
    return w.reshape(kh * kw * cin, cout)


# ---------------------------------------------------------------------------
# forward / backward


def check_images(model: Model, images) -> np.ndarray:
    """Validate a batch (N, H, W, C) against the model and cast to its dtype."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise StructuralError(f"expected a 4-d batch (N, H, W, C), got rank {images.ndim}")
    for axis, (got, want) in enumerate(zip(images.shape[1:], model.input_shape)):
        if got != want:
            name = ("height", "width", "channels")[axis]
            raise StructuralError(f"image {name} is {got}, model expects {want}")
    return np.ascontiguousarray(images, dtype=model.dtype)


def check_image(model: Model, image) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3:
        raise StructuralError(f"expected an image of rank 3 (H, W, C), got rank {image.ndim}")
    return check_images(model, image[None])


def check_labels(model: Model, labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise StructuralError(f"{labels.shape[0]} labels for {n} images")
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise InputError(f"label out of range [0, {model.num_classes})")
    return labels


def _forward(model: Model, x):
    p = model.params
    a = model.arch
    n = x.shape[0]
    h, w, _ = a.input_shape

    cols1, r1 = _conv_relu(x, p["conv1_w"], p["conv1_b"])
    p1, idx1 = K.maxpool2(r1.reshape(n, h, w, a.conv1_filters))

    cols2, r2 = _conv_relu(p1, p["conv2_w"], p["conv2_b"])
    p2, idx2 = K.maxpool2(r2.reshape(n, h // 2, w // 2, a.conv2_filters))

    flat = p2.reshape(n, -1)
    r3 = (p["dense_w"].T @ flat.T).T
    r3 += p["dense_b"]
    np.maximum(r3, 0, out=r3)
    logits = r3 @ p["out_w"] + p["out_b"]
    # ReLU outputs double as their own derivative masks (r > 0 iff z > 0)
    cache = (x, cols1, r1, idx1, p1.shape, cols2, r2, idx2, flat, r3)
    return logits, cache


def _backward(model: Model, cache, dlogits, want_params=True, want_input=True):
    p = model.params
    a = model.arch
    x, cols1, r1, idx1, p1_shape, cols2, r2, idx2, flat, r3 = cache
    grads = {}

    if want_params:
        grads["out_w"] = r3.T @ dlogits
        grads["out_b"] = dlogits.sum(axis=0)
    dz3 = dlogits @ p["out_w"].T
    dz3 *= r3 > 0
    if want_params:
        grads["dense_w"] = flat.T @ dz3
        grads["dense_b"] = dz3.sum(axis=0)
    dp2 = (dz3 @ p["dense_w"].T).reshape(idx2.shape)
    dz2 = K.maxpool2_backward(dp2, idx2).reshape(r2.shape)
    dz2 *= r2 > 0
    if want_params:
        grads["conv2_w"] = (cols2.T @ dz2).reshape(p["conv2_w"].shape)
        grads["conv2_b"] = dz2.sum(axis=0)
    dp1 = K.col2im(dz2 @ _kernel_matrix(p["conv2_w"]).T, *p1_shape, a.conv2_kernel)
    dz1 = K.maxpool2_backward(dp1, idx1).reshape(r1.shape)
    dz1 *= r1 > 0
    if want_params:
        grads["conv1_w"] = (cols1.T @ dz1).reshape(p["conv1_w"].shape)
        grads["conv1_b"] = dz1.sum(axis=0)
    dx = None
    if want_input:
        dx = K.col2im(dz1 @ _kernel_matrix(p["conv1_w"]).T, *x.shape, a.conv1_kernel)
    return grads, dx


def softmax_cross_entropy(logits, labels):
    """Per-example losses and d(loss)/d(logits) for a batch of logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(len(labels))
    losses = -logp[rows, labels]
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1
    return losses, dlogits


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# public API


def forward_batch(model: Model, images) -> np.ndarray:
    x = check_images(model, images)
    if isinstance(model, LinearModel):
        return x.reshape(len(x), -1) @ model.weights + model.bias
    logits, _ = _forward(model, x)
    return logits


def forward(model: Model, image) -> np.ndarray:
    """Logits for a single (H, W, C) image."""
    return forward_batch(model, check_image(model, image))[0]


def loss(logits, label) -> float:
    """Softmax cross-entropy of one logit vector against a class index."""
    logits = np.asarray(logits)
    if logits.ndim != 1:
        raise StructuralError(f"expected a logit vector, got shape {logits.shape}")
    label = int(label)
    if not 0 <= label < logits.shape[0]:
        raise InputError(f"label {label} out of range [0, {logits.shape[0]})")
    losses, _ = softmax_cross_entropy(logits[None], np.array([label]))
    return float(losses[0])


def batch_gradients(model: Model, images, labels):
    """Mean loss over the batch, its parameter gradients, and the logits."""
    x = check_images(model, images)
    labels = check_labels(model, labels, x.shape[0])
    logits, cache = _forward(model, x)
    losses, dlogits = softmax_cross_entropy(logits, labels)
    grads, _ = _backward(model, cache, dlogits / x.shape[0], want_input=False)
    return float(losses.mean()), grads, logits


def param_gradients(model: Model, image, label) -> GradientBundle:
    x = check_image(model, image)
    _, grads, _ = batch_gradients(model, x, [label])
    return grads


def input_gradient_batch(model: Model, images, labels):
    """Per-image d(loss)/d(pixel) for a batch, plus per-image losses and logits.

    Each image's gradient is that of its own loss; images do not interact.
    """
    x = check_images(model, images)
    labels = check_labels(model, labels, x.shape[0])
    if isinstance(model, LinearModel):
        logits = forward_batch(model, x)
        losses, dlogits = softmax_cross_entropy(logits, labels)
        return (dlogits @ model.weights.T).reshape(x.shape), losses, logits
    logits, cache = _forward(model, x)
    losses, dlogits = softmax_cross_entropy(logits, labels)
    _, dx = _backward(model, cache, dlogits, want_params=False)
    return dx, losses, logits


def input_gradient(model: Model, image, label) -> np.ndarray:
    x = check_image(model, image)
    dx, _, _ = input_gradient_batch(model, x, [label])
    return dx[0]


def batch_losses(model: Model, images, labels) -> np.ndarray:
    x = check_images(model, images)
    labels = check_labels(model, labels, x.shape[0])
    losses, _ = softmax_cross_entropy(forward_batch(model, x), labels)
    return losses


# ---------------------------------------------------------------------------
# optimizers


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise InputError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise InputError("learning rate must be positive")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def apply_update(model: Model, grads: GradientBundle, state: OptimizerState,
                 config: OptimizerConfig = OptimizerConfig()) -> Model:
    """Return updated parameters; ``state`` is advanced in place."""
    shapes = {k: v.shape for k, v in model.params.items()}
    if set(grads) != set(shapes):
        raise StructuralError(f"gradient names {sorted(grads)} != {sorted(shapes)}")
    for name, shape in shapes.items():
        if np.shape(grads[name]) != shape:
            raise StructuralError(f"{name}: gradient shape {np.shape(grads[name])} != {shape}")

    state.step += 1
    dtype = model.dtype
    new = {}
    if config.kind == "sgd":
        for name, w in model.params.items():
            new[name] = (w - dtype.type(config.lr) * grads[name]).astype(dtype)
        return Model(model.arch, new)

    b1, b2 = config.beta1, config.beta2
    t = state.step
    # fold both bias corrections into the step size
    lr_t = config.lr * math.sqrt(1 - b2 ** t) / (1 - b1 ** t)
    eps_t = config.eps * math.sqrt(1 - b2 ** t)
    for name, w in model.params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        g = np.ascontiguousarray(grads[name], dtype=dtype)
        new[name] = K.adam_step(np.ascontiguousarray(w), g, state.m[name], state.v[name],
                                lr_t, b1, b2, eps_t)
    return Model(model.arch, new)
