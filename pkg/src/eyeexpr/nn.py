"""Dense-tensor network layers with hand-written forward/backward passes.

The layer vocabulary is fixed: conv2d, relu, maxpool2x2, flatten, dense,
softmax.  Activations are NHWC float arrays; the training path runs in
float32, the verification path (finite-difference gradient checking) in
float64.  No general autodiff: each layer's backward is derived by hand and
validated against central finite differences.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError, InternalError, NumericsError

LAYER_KINDS = ("conv2d", "relu", "maxpool2x2", "flatten", "dense", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int | None = None
    kernel_size: int | None = None
    padding: str | None = None
    units: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if not self.out_channels or self.out_channels < 1:
                raise ConfigError("conv2d needs a positive out_channels")
            if not self.kernel_size or self.kernel_size < 1:
                raise ConfigError("conv2d needs a positive kernel_size")
            if self.padding not in ("same", "valid"):
                raise ConfigError("conv2d padding must be 'same' or 'valid'")
            if self.padding == "same" and self.kernel_size % 2 == 0:
                raise ConfigError("'same' padding requires an odd kernel_size")
        elif self.kind == "dense":
            if not self.units or self.units < 1:
                raise ConfigError("dense needs a positive units")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for name in ("out_channels", "kernel_size", "padding", "units"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    @staticmethod
    def from_dict(obj: dict) -> "LayerSpec":
        known = {f.name for f in dataclasses.fields(LayerSpec)}
        extra = sorted(set(obj) - known)
        if extra:
            raise ConfigError(f"layer spec has unknown fields {extra}")
        return LayerSpec(**obj)


def conv2d(out_channels: int, kernel_size: int = 3, padding: str = "same") -> LayerSpec:
    return LayerSpec("conv2d", out_channels=out_channels, kernel_size=kernel_size, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2x2() -> LayerSpec:
    return LayerSpec("maxpool2x2")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.045
    momentum: float = 0.9
    decay: float = 0.9
    epsilon: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if not 0 < self.decay < 1:
            raise ConfigError("decay must be in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


@dataclass(frozen=True)
class LossSpec:
    num_classes: int
    l2_lambda: float = 0.0004

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.l2_lambda < 0:
            raise ConfigError("l2_lambda must be non-negative")


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise stabilized softmax; finite for logit magnitudes up to 1e4 and beyond."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


_PROB_FLOOR = 1e-12


def cross_entropy_loss(
    probs: np.ndarray,
    one_hot: np.ndarray,
    l2_params: list[np.ndarray],
    spec: LossSpec,
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy plus an L2 penalty scaled by 1/batch.

    Returns (loss, gradient w.r.t. the pre-softmax logits).  The logit
    gradient uses the softmax cross-entropy identity (probs - labels) / N.
    Probabilities are clamped to [1e-12, 1 - 1e-12] before the log so a
    saturated prediction cannot produce an infinite loss.
    """
    probs = np.asarray(probs)
    one_hot = np.asarray(one_hot)
    if probs.shape != one_hot.shape:
        raise InputError(f"probs shape {probs.shape} != labels shape {one_hot.shape}")
    if probs.ndim != 2 or probs.shape[1] != spec.num_classes:
        raise InputError(f"expected (N, {spec.num_classes}) probabilities, got {probs.shape}")
    row_sums = probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise InputError("probability rows must sum to 1 within 1e-6")
    label_sums = one_hot.sum(axis=1)
    if np.any(label_sums == 0):
        raise InputError("zero-row label: every sample needs a one-hot label")
    if np.any(np.abs(label_sums - 1.0) > 1e-9) or np.any((one_hot != 0) & (one_hot != 1)):
        raise InputError("labels must be one-hot")

    n = probs.shape[0]
    clamped = np.clip(probs, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    ce = -np.mean(np.sum(one_hot * np.log(clamped), axis=1))
    l2 = 0.0
    if spec.l2_lambda > 0:
        l2 = spec.l2_lambda / n * sum(float(np.sum(np.square(w, dtype=np.float64))) for w in l2_params)
    dlogits = (probs - one_hot) / n
    loss = float(ce) + float(l2)
    if not np.isfinite(loss):
        raise NumericsError("loss is not finite")
    return loss, dlogits


def _init_params(spec: LayerSpec, in_shape: tuple, rng: np.random.Generator, dtype) -> dict:
    """Fan-in-scaled uniform weights, zero biases.

    Conv kernels are mean-removed per filter so the initial network has no
    response to a constant brightness offset; on all-positive image inputs a
    random-sum kernel stack starts dominated by that common mode and can sit
    on the uniform-softmax plateau for many epochs.
    """
    if spec.kind == "conv2d":
        k, cin, cout = spec.kernel_size, in_shape[2], spec.out_channels
        limit = np.sqrt(3.0 / (k * k * cin))
        w = rng.uniform(-limit, limit, size=(k, k, cin, cout))
        w -= w.mean(axis=(0, 1, 2), keepdims=True)
        return {"W": w.astype(dtype), "b": np.zeros(cout, dtype=dtype)}
    if spec.kind == "dense":
        d, u = in_shape[0], spec.units
        limit = np.sqrt(3.0 / d)
        w = rng.uniform(-limit, limit, size=(d, u)).astype(dtype)
        return {"W": w, "b": np.zeros(u, dtype=dtype)}
    return {}


def _out_shape(spec: LayerSpec, in_shape: tuple, index: int) -> tuple:
    name = f"layer {index} ({spec.kind})"
    if spec.kind == "conv2d":
        if len(in_shape) != 3:
            raise ConfigError(f"{name}: expects an image input, got shape {in_shape}")
        h, w, _ = in_shape
        if spec.padding == "valid":
            h, w = h - spec.kernel_size + 1, w - spec.kernel_size + 1
        if h < 1 or w < 1:
            raise ConfigError(f"{name}: kernel {spec.kernel_size} larger than input {in_shape[:2]}")
        return (h, w, spec.out_channels)
    if spec.kind == "relu":
        return in_shape
    if spec.kind == "maxpool2x2":
        if len(in_shape) != 3:
            raise ConfigError(f"{name}: expects an image input, got shape {in_shape}")
        h, w, c = in_shape
        if h < 2 or w < 2:
            raise ConfigError(f"{name}: input {in_shape[:2]} too small to pool")
        return (h // 2, w // 2, c)
    if spec.kind == "flatten":
        return (int(np.prod(in_shape)),)
    if spec.kind == "dense":
        if len(in_shape) != 1:
            raise ConfigError(f"{name}: expects a flat input, got shape {in_shape}")
        return (spec.units,)
    if spec.kind == "softmax":
        if len(in_shape) != 1:
            raise ConfigError(f"{name}: expects a flat input, got shape {in_shape}")
        return in_shape
    raise ConfigError(f"{name}: unknown kind")


class Network:
    """An ordered layer stack with parameters and hand-written backprop.

    forward() retains per-layer activations so backward() can run without
    recomputation; backward() takes the gradient w.r.t. the pre-softmax
    logits (the loss supplies it via the softmax cross-entropy identity).
    """

    def __init__(self, specs: list[LayerSpec], input_size: tuple[int, int],
                 seed: int = 0, dtype=np.float32, in_channels: int = 1):
        if not specs:
            raise ConfigError("network needs at least one layer")
        if specs[-1].kind != "softmax":
            raise ConfigError("the final layer must be softmax")
        if any(s.kind == "softmax" for s in specs[:-1]):
            raise ConfigError("softmax is only allowed as the final layer")
        if specs[-2].kind != "dense":
            raise ConfigError("softmax must follow a dense layer")

        self.specs = list(specs)
        self.input_size = (int(input_size[0]), int(input_size[1]))
        self.dtype = np.dtype(dtype)
        self.seed = seed

        shape = (self.input_size[0], self.input_size[1], in_channels)
        self.shapes = [shape]
        for i, spec in enumerate(self.specs):
            shape = _out_shape(spec, shape, i)
            self.shapes.append(shape)

        rng = np.random.default_rng([seed])
        self.params: list[dict] = [
            _init_params(spec, self.shapes[i], rng, self.dtype) for i, spec in enumerate(self.specs)
        ]

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def parameter_arrays(self) -> list[np.ndarray]:
        """All parameter tensors in declaration order (weights then bias per layer)."""
        out = []
        for p in self.params:
            if p:
                out.extend([p["W"], p["b"]])
        return out

    def set_parameter_arrays(self, arrays: list[np.ndarray]) -> None:
        it = iter(arrays)
        for p in self.params:
            if p:
                w, b = next(it), next(it)
                if w.shape != p["W"].shape or b.shape != p["b"].shape:
                    raise ConfigError("parameter shapes do not match the architecture")
                p["W"] = np.asarray(w, dtype=self.dtype)
                p["b"] = np.asarray(b, dtype=self.dtype)

    def weight_arrays(self) -> list[np.ndarray]:
        """Weight matrices/kernels only; biases are excluded from the L2 penalty."""
        return [p["W"] for p in self.params if p]

    def num_parameters(self) -> int:
        return sum(a.size for a in self.parameter_arrays())

    def to_dtype(self, dtype) -> "Network":
        clone = Network(self.specs, self.input_size, seed=self.seed, dtype=dtype,
                        in_channels=self.shapes[0][2])
        clone.set_parameter_arrays([a.astype(dtype) for a in self.parameter_arrays()])
        return clone

    # forward / backward ---------------------------------------------------

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[..., None]
        if x.ndim != 4 or x.shape[1:] != self.shapes[0]:
            raise ConfigError(
                f"layer 0 ({self.specs[0].kind}): input shape {x.shape[1:]} does not match "
                f"expected {self.shapes[0]}"
            )
        caches: list = []
        for i, spec in enumerate(self.specs):
            if spec.kind == "conv2d":
                x, cache = _conv_forward(x, self.params[i], spec)
            elif spec.kind == "relu":
                cache = x > 0
                x = np.maximum(x, 0)
            elif spec.kind == "maxpool2x2":
                x, cache = _maxpool_forward(x)
            elif spec.kind == "flatten":
                cache = x.shape
                x = x.reshape(x.shape[0], -1)
            elif spec.kind == "dense":
                cache = x
                x = x @ self.params[i]["W"] + self.params[i]["b"]
            elif spec.kind == "softmax":
                cache = None
                x = softmax_probs(x)
            caches.append(cache)
        return x, caches

    def forward_probs(self, x: np.ndarray) -> np.ndarray:
        probs, _ = self.forward(x)
        return probs

    def backward(self, caches: list, dlogits: np.ndarray) -> list[np.ndarray]:
        """Gradient of the loss for every parameter tensor, in declaration order.

        `dlogits` is d(loss)/d(pre-softmax logits); the softmax layer itself
        is differentiated jointly with the cross-entropy loss.
        """
        if len(caches) != len(self.specs):
            raise InternalError("backward called without matching forward activations")
        out: list[np.ndarray] = []
        d = np.asarray(dlogits, dtype=self.dtype)
        layer_grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for i in range(len(self.specs) - 1, -1, -1):
            spec, cache = self.specs[i], caches[i]
            if spec.kind == "softmax":
                continue  # folded into the loss gradient
            if spec.kind == "dense":
                x = cache
                layer_grads[i] = (x.T @ d, d.sum(axis=0))
                d = d @ self.params[i]["W"].T
            elif spec.kind == "flatten":
                d = d.reshape(cache)
            elif spec.kind == "relu":
                d = d * cache
            elif spec.kind == "maxpool2x2":
                d = _maxpool_backward(d, cache)
            elif spec.kind == "conv2d":
                d, dw, db = _conv_backward(d, cache, self.params[i], spec)
                layer_grads[i] = (dw, db)
        for i, p in enumerate(self.params):
            if p:
                dw, db = layer_grads[i]
                out.extend([dw, db])
        return out


def _conv_forward(x, params, spec):
    k = spec.kernel_size
    n, h, w, cin = x.shape
    if spec.padding == "same":
        p = (k - 1) // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    else:
        xp = x
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))  # (n, oh, ow, cin, k, k)
    oh, ow = windows.shape[1], windows.shape[2]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, k * k * cin)
    wmat = params["W"].reshape(k * k * cin, -1)
    y = cols @ wmat + params["b"]
    cout = wmat.shape[1]
    cache = (x.shape, cols, oh, ow)
    return y.reshape(n, oh, ow, cout), cache


def _conv_backward(dy, cache, params, spec):
    x_shape, cols, oh, ow = cache
    n, h, w, cin = x_shape
    k = spec.kernel_size
    cout = params["W"].shape[3]
    dymat = dy.reshape(n * oh * ow, cout)
    dw = (cols.T @ dymat).reshape(params["W"].shape)
    db = dymat.sum(axis=0)
    dcols = dymat @ params["W"].reshape(k * k * cin, cout).T
    d6 = dcols.reshape(n, oh, ow, k, k, cin)
    p = (k - 1) // 2 if spec.padding == "same" else 0
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, cin), dtype=dy.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, ki : ki + oh, kj : kj + ow, :] += d6[:, :, :, ki, kj, :]
    dx = dxp[:, p : p + h, p : p + w, :] if p else dxp
    return dx, dw, db


def _maxpool_forward(x):
    n, h, w, c = x.shape
    oh, ow = h // 2, w // 2
    xt = x[:, : oh * 2, : ow * 2, :].reshape(n, oh, 2, ow, 2, c)
    windows = xt.transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, 4)
    idx = windows.argmax(axis=-1)  # first max wins: deterministic tie-break
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def _maxpool_backward(dy, cache):
    x_shape, idx = cache
    n, h, w, c = x_shape
    oh, ow = h // 2, w // 2
    d4 = np.zeros((n, oh, ow, c, 4), dtype=dy.dtype)
    np.put_along_axis(d4, idx[..., None], dy[..., None], axis=-1)
    dxt = d4.reshape(n, oh, ow, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, oh * 2, ow * 2, c)
    if oh * 2 == h and ow * 2 == w:
        return dxt
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, : oh * 2, : ow * 2, :] = dxt
    return dx


# Optimizer ---------------------------------------------------------------


@dataclass
class RMSPropState:
    """Per-parameter mean-square accumulators and momentum buffers."""

    ms: list[np.ndarray] = field(default_factory=list)
    momentum: list[np.ndarray] = field(default_factory=list)

    @staticmethod
    def zeros_like(params: list[np.ndarray]) -> "RMSPropState":
        return RMSPropState(
            ms=[np.zeros_like(p) for p in params],
            momentum=[np.zeros_like(p) for p in params],
        )


def rmsprop_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: RMSPropState,
    config: OptimizerConfig,
    current_lr: float,
) -> tuple[list[np.ndarray], RMSPropState]:
    """One update: ms <- d*ms + (1-d)*g^2; m <- mu*m + lr*g/sqrt(ms+eps); w <- w - m.

    Epsilon sits inside the square root.  Deterministic: same inputs give the
    same outputs; returns fresh arrays and never mutates its arguments.
    """
    if current_lr <= 0:
        raise InputError("current_lr must be positive")
    if len(params) != len(grads) or len(params) != len(state.ms):
        raise InputError("params, grads and state must align")
    new_params, new_ms, new_m = [], [], []
    for i, (w, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient in parameter tensor {i}; aborting step")
        ms = config.decay * state.ms[i] + (1.0 - config.decay) * np.square(g)
        m = config.momentum * state.momentum[i] + current_lr * g / np.sqrt(ms + config.epsilon)
        new_ms.append(ms)
        new_m.append(m)
        new_params.append(w - m)
    return new_params, RMSPropState(ms=new_ms, momentum=new_m)


# Gradient verification ----------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    num_checked: int
    num_kink_skipped: int
    tolerance: float
    passed: bool
    worst: tuple[int, int, float, float]  # (param tensor index, flat index, analytic, numeric)


def loss_and_grads(network: Network, x: np.ndarray, one_hot: np.ndarray,
                   spec: LossSpec) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Total loss (cross-entropy + L2 on weights) and its parameter gradients."""
    probs, caches = network.forward(x)
    loss, dlogits = cross_entropy_loss(probs, one_hot, network.weight_arrays(), spec)
    grads = network.backward(caches, dlogits)
    if spec.l2_lambda > 0:
        n = x.shape[0]
        arrays = network.parameter_arrays()
        for i, arr in enumerate(arrays):
            # weights occupy even slots, biases odd; only weights carry L2
            if i % 2 == 0:
                grads[i] = grads[i] + (2.0 * spec.l2_lambda / n) * arr
    return loss, grads, probs


def _branch_signature(network: Network, caches: list) -> bytes:
    """Byte fingerprint of the active piecewise-linear branch (relu masks, pool argmaxes)."""
    parts = []
    for spec, cache in zip(network.specs, caches):
        if spec.kind == "relu":
            parts.append(np.packbits(cache).tobytes())
        elif spec.kind == "maxpool2x2":
            parts.append(cache[1].astype(np.uint8).tobytes())
    return b"".join(parts)


def finite_difference_check(
    arrays: list[np.ndarray],
    eval_loss,
    analytic_grads: list[np.ndarray],
    tolerance: float,
    step: float,
    num_coords: int,
    seed: int = 0,
) -> GradCheckReport:
    """Core central-difference comparison over randomly sampled coordinates.

    `eval_loss()` returns (loss, branch_signature) at the current parameter
    values; signature may be None when the loss is smooth.  Coordinates where
    the branch signature changes inside [w - step, w + step] straddle a kink
    of a piecewise-linear activation; the central difference does not estimate
    the branch derivative there, so such coordinates are skipped and replaced.
    Skipping depends only on forward activations, never on the gradient being
    validated.
    """
    sizes = [a.size for a in arrays]
    total = sum(sizes)
    bounds = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)
    order = rng.permutation(total)

    _, sig0 = eval_loss()
    max_rel = 0.0
    worst = (0, 0, 0.0, 0.0)
    checked = 0
    skipped = 0
    for flat in order:
        if checked >= num_coords:
            break
        flat = int(flat)
        ti = int(np.searchsorted(bounds, flat, side="right")) - 1
        local = flat - bounds[ti]
        arr = arrays[ti]
        orig = arr.flat[local]
        arr.flat[local] = orig + step
        lp, sig_p = eval_loss()
        arr.flat[local] = orig - step
        lm, sig_m = eval_loss()
        arr.flat[local] = orig
        if sig0 is not None and (sig_p != sig0 or sig_m != sig0):
            skipped += 1
            continue
        numeric = (lp - lm) / (2.0 * step)
        analytic = float(analytic_grads[ti].flat[local])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        checked += 1
        if rel > max_rel:
            max_rel = rel
            worst = (ti, int(local), analytic, float(numeric))
    return GradCheckReport(
        max_rel_error=float(max_rel),
        num_checked=checked,
        num_kink_skipped=skipped,
        tolerance=tolerance,
        passed=checked > 0 and max_rel < tolerance,
        worst=worst,
    )


def grad_check(
    network: Network,
    x: np.ndarray,
    one_hot: np.ndarray,
    spec: LossSpec,
    tolerance: float = 1e-4,
    step: float = 1e-3,
    num_coords: int = 120,
    seed: int = 0,
) -> GradCheckReport:
    """Verify analytic network gradients against central finite differences.

    Requires a float64 network (finite differences are unreliable in
    float32).  Intended for compact models, roughly <= 5000 parameters.
    """
    if network.dtype != np.float64:
        raise InputError("grad_check requires the float64 verification path")
    x = np.asarray(x, dtype=np.float64)
    _, grads, _ = loss_and_grads(network, x, one_hot, spec)

    def eval_loss():
        probs, caches = network.forward(x)
        loss, _ = cross_entropy_loss(probs, one_hot, network.weight_arrays(), spec)
        return loss, _branch_signature(network, caches)

    return finite_difference_check(
        network.parameter_arrays(), eval_loss, grads,
        tolerance=tolerance, step=step, num_coords=num_coords, seed=seed,
    )
