"""A small deterministic 3D convolutional segmentation network.

Explicit forward and backward passes (no autodiff), soft-Dice loss with its
analytic gradient, and bias-corrected Adam. The architecture is a stack of
3x3x3 convolutions (stride 1, zero padding 1, cross-correlation convention)
with ReLU, a 1x1x1 linear head, and a per-voxel softmax; the input volume is
z-score normalized over its voxels first.

Tensors are numpy arrays in C order. Activations are laid out channels-first
(C, D, H, W). Every core routine also runs "banked" over a leading axis of
independent per-tile models, which is how the trainer updates all tiles of a
plan in one call; the single-model functions are the T=1 case of the same
code path. Training state is float32; gradient verification can run the same
code in float64 by supplying float64 parameters and inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"TBNN"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    num_classes: int
    in_channels: int = 1
    hidden_channels: int = 8
    hidden_layers: int = 2

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.hidden_layers < 1:
            raise ValueError(f"hidden_layers must be >= 1, got {self.hidden_layers}")
        if self.in_channels != 1:
            raise ValueError("only single-channel input is supported")
        if self.hidden_channels < 1:
            raise ValueError("hidden_channels must be >= 1")

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "in_channels": self.in_channels,
                "hidden_channels": self.hidden_channels,
                "hidden_layers": self.hidden_layers}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class ModelParams:
    """All weights and biases of one network, in layer order."""

    conv_weights: list  # per layer (Co, Ci, 3, 3, 3)
    conv_biases: list  # per layer (Co,)
    head_weight: np.ndarray  # (C, hidden): a 1x1x1 convolution
    head_bias: np.ndarray  # (C,)
    init_seed: int | None = None

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            out[f"conv{i}.weight"] = w
            out[f"conv{i}.bias"] = b
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def replace_tensors(self, tensors: dict) -> "ModelParams":
        n = len(self.conv_weights)
        return ModelParams(
            conv_weights=[tensors[f"conv{i}.weight"] for i in range(n)],
            conv_biases=[tensors[f"conv{i}.bias"] for i in range(n)],
            head_weight=tensors["head.weight"],
            head_bias=tensors["head.bias"],
            init_seed=self.init_seed,
        )

    def copy(self) -> "ModelParams":
        return self.replace_tensors({k: v.copy() for k, v in self.tensors().items()})


@dataclass
class ParamsBank:
    """Per-tile model parameters stacked along a leading tile axis."""

    conv_weights: list  # per layer (T, Co, Ci, 3, 3, 3)
    conv_biases: list  # per layer (T, Co)
    head_weight: np.ndarray  # (T, C, hidden)
    head_bias: np.ndarray  # (T, C)
    init_seeds: list = field(default_factory=list)

    @property
    def num_tiles(self) -> int:
        return self.head_weight.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            out[f"conv{i}.weight"] = w
            out[f"conv{i}.bias"] = b
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def replace_tensors(self, tensors: dict) -> "ParamsBank":
        n = len(self.conv_weights)
        return ParamsBank(
            conv_weights=[tensors[f"conv{i}.weight"] for i in range(n)],
            conv_biases=[tensors[f"conv{i}.bias"] for i in range(n)],
            head_weight=tensors["head.weight"],
            head_bias=tensors["head.bias"],
            init_seeds=list(self.init_seeds),
        )

    def copy(self) -> "ParamsBank":
        return self.replace_tensors({k: v.copy() for k, v in self.tensors().items()})

    @classmethod
    def from_models(cls, models) -> "ParamsBank":
        first = models[0]
        n = len(first.conv_weights)
        return cls(
            conv_weights=[np.stack([m.conv_weights[i] for m in models])
                          for i in range(n)],
            conv_biases=[np.stack([m.conv_biases[i] for m in models])
                         for i in range(n)],
            head_weight=np.stack([m.head_weight for m in models]),
            head_bias=np.stack([m.head_bias for m in models]),
            init_seeds=[m.init_seed for m in models],
        )

    def model(self, i: int) -> ModelParams:
        return ModelParams(
            conv_weights=[w[i].copy() for w in self.conv_weights],
            conv_biases=[b[i].copy() for b in self.conv_biases],
            head_weight=self.head_weight[i].copy(),
            head_bias=self.head_bias[i].copy(),
            init_seed=self.init_seeds[i] if self.init_seeds else None,
        )

    def models(self) -> list:
        return [self.model(i) for i in range(self.num_tiles)]


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_params(config: NetworkConfig, seed: int,
                dtype=np.float32) -> ModelParams:
    """Uniform +-sqrt(6/fan_in) weights, zero biases; deterministic by seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    conv_weights, conv_biases = [], []
    ci = config.in_channels
    for _ in range(config.hidden_layers):
        co = config.hidden_channels
        bound = np.sqrt(6.0 / (ci * 27))
        conv_weights.append(rng.uniform(-bound, bound,
                                        size=(co, ci, 3, 3, 3)).astype(dtype))
        conv_biases.append(np.zeros(co, dtype=dtype))
        ci = co
    bound = np.sqrt(6.0 / ci)
    head_weight = rng.uniform(-bound, bound,
                              size=(config.num_classes, ci)).astype(dtype)
    head_bias = np.zeros(config.num_classes, dtype=dtype)
    return ModelParams(conv_weights=conv_weights, conv_biases=conv_biases,
                       head_weight=head_weight, head_bias=head_bias,
                       init_seed=seed)


def init_bank(config: NetworkConfig, num_tiles: int, seed: int,
              dtype=np.float32) -> ParamsBank:
    """One independently initialized model per tile (seeds seed+i)."""
    return ParamsBank.from_models(
        [init_params(config, seed + i, dtype=dtype) for i in range(num_tiles)])


def init_adam_state(params, lr: float = 1e-4, beta1: float = 0.9,
                    beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    tensors = params.tensors()
    return AdamState(m={k: np.zeros_like(v) for k, v in tensors.items()},
                     v={k: np.zeros_like(v) for k, v in tensors.items()},
                     t=0, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)


# ---------------------------------------------------------------------------
# convolution core (banked over a leading tile axis)

def _im2col(x: np.ndarray) -> np.ndarray:
    """(T, C, D, H, W) -> (T, C*27, D*H*W) patch matrix for a padded 3^3 window."""
    t, c, d, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    v = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))
    col = v.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(t, c * 27, d * h * w)
    return np.ascontiguousarray(col)


def _conv_fwd(x, w, b, col=None):
    t, ci, d, h, ww = x.shape
    co = w.shape[1]
    if w.shape[2] != ci:
        raise ValueError(f"weight expects {w.shape[2]} input channels, got {ci}")
    if col is None:
        col = _im2col(x)
    wm = w.reshape(t, co, ci * 27)
    # (T,N,K) @ (T,K,Co): this gemm orientation is much faster than (Co,K)@(K,N)
    y = np.matmul(col.transpose(0, 2, 1), wm.transpose(0, 2, 1)) + b[:, None, :]
    y = np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(t, co, d, h, ww)
    return y, col


def _conv_bwd(x, w, grad_out, col=None, need_grad_input=True):
    t, ci, d, h, ww = x.shape
    co = w.shape[1]
    if grad_out.shape != (t, co) + x.shape[2:]:
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(t, co) + x.shape[2:]}")
    n = d * h * ww
    if col is None:
        col = _im2col(x)
    gm = grad_out.reshape(t, co, n)
    grad_b = gm.sum(axis=2)
    grad_w = np.matmul(gm, col.transpose(0, 2, 1)).reshape(w.shape)
    grad_x = None
    if need_grad_input:
        # gradient w.r.t. the input is a correlation of grad_out with the
        # kernels flipped spatially and transposed over channels
        wf = np.ascontiguousarray(
            w[:, :, :, ::-1, ::-1, ::-1].transpose(0, 2, 1, 3, 4, 5))
        grad_x, _ = _conv_fwd(grad_out, wf,
                              np.zeros((t, ci), dtype=grad_out.dtype))
    return grad_x, grad_w, grad_b


def _head_fwd(a, hw, hb):
    t, hc, d, h, w = a.shape
    c = hw.shape[1]
    am = a.reshape(t, hc, -1)
    y = np.matmul(am.transpose(0, 2, 1), hw.transpose(0, 2, 1)) + hb[:, None, :]
    return np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(t, c, d, h, w)


def _head_bwd(a, hw, grad_out):
    t, hc = a.shape[:2]
    c = hw.shape[1]
    am = a.reshape(t, hc, -1)
    gm = grad_out.reshape(t, c, -1)
    grad_hw = np.matmul(gm, am.transpose(0, 2, 1))
    grad_hb = gm.sum(axis=2)
    grad_a = np.matmul(hw.transpose(0, 2, 1), gm).reshape(a.shape)
    return grad_a, grad_hw, grad_hb


def _softmax_bank(logits):
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def _zscore_bank(x):
    axes = tuple(range(1, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    sd = x.std(axis=axes, keepdims=True)
    safe = np.where(sd > 0, sd, np.ones_like(sd))
    return (x - mean) / safe


@dataclass
class ForwardCache:
    x_norm: np.ndarray
    pre_activations: list
    activations: list  # activations[0] is x_norm; then post-ReLU per layer
    probs: np.ndarray
    bank: ParamsBank
    cols: list
    single: bool = False


def bank_forward(x: np.ndarray, bank: ParamsBank,
                 keep_cols: bool = True) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass for a bank of models on (T, 1, D, H, W) inputs."""
    if x.ndim != 5:
        raise ValueError(f"expected (T, C, D, H, W) input, got shape {x.shape}")
    if x.shape[0] != bank.num_tiles:
        raise ValueError(f"input has {x.shape[0]} tiles, bank has {bank.num_tiles}")
    a = _zscore_bank(x)
    x_norm = a
    pre, acts, cols = [], [a], []
    for w, b in zip(bank.conv_weights, bank.conv_biases):
        z, col = _conv_fwd(a, w, b)
        pre.append(z)
        cols.append(col if keep_cols else None)
        a = np.maximum(z, 0)
        acts.append(a)
    logits = _head_fwd(a, bank.head_weight, bank.head_bias)
    probs = _softmax_bank(logits)
    return probs, ForwardCache(x_norm=x_norm, pre_activations=pre,
                               activations=acts, probs=probs, bank=bank,
                               cols=cols)


def bank_backward(cache: ForwardCache, grad_probs: np.ndarray) -> dict:
    """Backpropagate d(loss)/d(probs) to gradients for every bank tensor."""
    probs = cache.probs
    if grad_probs.shape != probs.shape:
        raise ValueError(
            f"grad_probs shape {grad_probs.shape} does not match cached "
            f"probs {probs.shape}")
    bank = cache.bank
    s = (grad_probs * probs).sum(axis=1, keepdims=True)
    grad_logits = probs * (grad_probs - s)
    a_last = cache.activations[-1]
    grad_a, grad_hw, grad_hb = _head_bwd(a_last, bank.head_weight, grad_logits)
    grads = {"head.weight": grad_hw, "head.bias": grad_hb}
    for layer in range(len(bank.conv_weights) - 1, -1, -1):
        grad_z = grad_a * (cache.pre_activations[layer] > 0)
        grad_a, grad_w, grad_b = _conv_bwd(
            cache.activations[layer], bank.conv_weights[layer], grad_z,
            col=cache.cols[layer], need_grad_input=layer > 0)
        grads[f"conv{layer}.weight"] = grad_w
        grads[f"conv{layer}.bias"] = grad_b
    return grads


def bank_dice_loss(probs, onehot, smooth: float = 1e-5,
                   include_background: bool = False):
    """Per-tile soft-Dice loss (T,) and its gradient w.r.t. probs."""
    if probs.shape != onehot.shape:
        raise ValueError(f"probs {probs.shape} vs truth {onehot.shape}")
    t, c = probs.shape[:2]
    pf = probs.reshape(t, c, -1)
    gf = onehot.reshape(t, c, -1)
    inter = (pf * gf).sum(axis=2)
    psum = pf.sum(axis=2)
    gsum = gf.sum(axis=2)
    num = 2.0 * inter + smooth
    den = psum + gsum + smooth
    soft_dice = num / den
    start = 0 if include_background else 1
    if c - start < 1:
        raise ValueError("no classes left to average in the Dice loss")
    k = c - start
    loss = 1.0 - soft_dice[:, start:].mean(axis=1)
    grad = (2.0 * gf * den[:, :, None] - num[:, :, None]) / (den ** 2)[:, :, None]
    grad = -grad / k
    if not include_background:
        grad[:, :start] = 0
    return loss, grad.reshape(probs.shape)


def _adam_update(tensors: dict, grads: dict, state: AdamState):
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise ArithmeticError(f"non-finite gradient for {name}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_tensors, new_m, new_v = {}, {}, {}
    for name, theta in tensors.items():
        g = grads[name]
        m = state.m[name] * b1 + (1.0 - b1) * g
        v = state.v[name] * b2 + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_tensors[name] = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_m[name] = m
        new_v[name] = v
    new_state = AdamState(m=new_m, v=new_v, t=t, lr=state.lr, beta1=state.beta1,
                          beta2=state.beta2, epsilon=state.epsilon)
    return new_tensors, new_state


def adam_step(params, grads: dict, state: AdamState):
    """One bias-corrected Adam update; returns fresh params and state."""
    new_tensors, new_state = _adam_update(params.tensors(), grads, state)
    return params.replace_tensors(new_tensors), new_state


# ---------------------------------------------------------------------------
# single-model operations (the T=1 case of the banked core)

def _as_input_array(volume) -> np.ndarray:
    # Volume3D carries its grid in .data; plain arrays pass through
    x = np.asarray(volume.data) if hasattr(volume, "header") else np.asarray(volume)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected a 3D volume or (C, D, H, W) array, got {x.shape}")
    return x


def conv3d_forward(inputs, weights, bias, padding: int = 1) -> np.ndarray:
    """3x3x3 cross-correlation with stride 1; output spatial dims == input."""
    if padding != 1:
        raise ValueError("only padding=1 is supported")
    x = np.asarray(inputs)
    y, _ = _conv_fwd(x[None], np.asarray(weights)[None], np.asarray(bias)[None])
    return y[0]


def conv3d_backward(inputs, weights, grad_output):
    """Gradients of a scalar loss w.r.t. conv input, weights, and bias."""
    x = np.asarray(inputs)
    gx, gw, gb = _conv_bwd(x[None], np.asarray(weights)[None],
                           np.asarray(grad_output)[None])
    return gx[0], gw[0], gb[0]


def softmax_channels(logits) -> np.ndarray:
    """Per-voxel softmax over the leading channel axis, max-subtracted."""
    logits = np.asarray(logits)
    if not np.isfinite(logits).all():
        raise ValueError("non-finite logits")
    return _softmax_bank(logits[None])[0]


def dice_loss(probs, truth_onehot, smooth: float = 1e-5,
              include_background: bool = False):
    """Soft-Dice loss (1 - mean soft dice over non-background classes)."""
    loss, grad = bank_dice_loss(np.asarray(probs)[None],
                                np.asarray(truth_onehot)[None],
                                smooth=smooth,
                                include_background=include_background)
    return float(loss[0]), grad[0]


def forward(volume, params: ModelParams):
    """z-score normalize, run the conv/ReLU stack and head, softmax."""
    x = _as_input_array(volume)
    bank = ParamsBank.from_models([params])
    probs, cache = bank_forward(x[None], bank)
    cache.single = True
    return probs[0], cache


def backward(cache: ForwardCache, grad_probs) -> dict:
    """Full-network parameter gradients from d(loss)/d(probs)."""
    g = np.asarray(grad_probs)
    if cache.single:
        grads = bank_backward(cache, g[None])
        return {k: v[0] for k, v in grads.items()}
    return bank_backward(cache, g)


def onehot_encode(labels: np.ndarray, num_classes: int,
                  dtype=np.float32) -> np.ndarray:
    """(..., D, H, W) int labels -> (num_classes, D, H, W) one-hot."""
    labels = np.asarray(labels)
    out = np.zeros((num_classes,) + labels.shape, dtype=dtype)
    for c in range(num_classes):
        out[c] = labels == c
    return out


# ---------------------------------------------------------------------------
# checkpoint container

def save_checkpoint(path, meta: dict, models) -> None:
    """Versioned binary container: magic, meta JSON, then per-model tensors
    as little-endian float32 payloads with shape prefixes."""
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(models)))
        for model in models:
            tensors = model.tensors()
            fh.write(struct.pack("<I", len(tensors)))
            for name, arr in tensors.items():
                nb = name.encode("utf-8")
                fh.write(struct.pack("<I", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _model_from_tensors(tensors: dict) -> ModelParams:
    n_conv = sum(1 for k in tensors if k.endswith(".weight") and k.startswith("conv"))
    return ModelParams(
        conv_weights=[tensors[f"conv{i}.weight"] for i in range(n_conv)],
        conv_biases=[tensors[f"conv{i}.bias"] for i in range(n_conv)],
        head_weight=tensors["head.weight"],
        head_bias=tensors["head.bias"],
    )


def load_checkpoint(path):
    """Read a checkpoint; returns (meta, list of ModelParams)."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (n_models,) = struct.unpack_from("<I", raw, off)
    off += 4
    models = []
    for _ in range(n_models):
        (n_tensors,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count,
                                offset=off).reshape(shape)
            off += 4 * count
            tensors[name] = arr.astype(np.float32)
        models.append(_model_from_tensors(tensors))
    return meta, models
