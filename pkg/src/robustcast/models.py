"""Forward evaluation and exact gradients for the four model families.

Two base families, each with an optional adaptive variant whose parameters
shift linearly with the missing pattern a (restricted to the maskable set):

* linear:     f(x, a) = w . x(a)                  adaptive: (w + D a) . x(a)
* network:    g1 = W0 x(a) + b0                   (first affine map, linear)
              g{m+1} = relu(Wm gm + bm)           for the remaining layers
              f = w_out . gM + b_out
  The adaptive variant adds the vector Dm a to every row of Wm (a rank-one
  row broadcast, so the pre-activation gains the scalar (Dm a) . gm on each
  unit) and D_out a to the output weights.

x(a) zeroes the missing coordinates. Gradients are hand-derived; there is no
autodiff dependency. All functions are pure; parameters are treated as
immutable snapshots.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._util import array_from_json, array_to_json
from .exceptions import ConfigError, DomainError, SizeError
from .missingness import MissingPattern

LR = "lr"
NN = "nn"


@dataclass(frozen=True)
class Architecture:
    """Shape of a model: input width, hidden widths (empty for linear), and
    optionally which input feature is the constant bias (kept out of weight
    decay for the linear family)."""

    input_dim: int
    hidden: tuple[int, ...] = ()
    bias_index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if any(w < 1 for w in self.hidden):
            raise ConfigError("hidden widths must be positive")
        if self.bias_index is not None and not (0 <= self.bias_index < self.input_dim):
            raise ConfigError("bias_index out of range")


@dataclass(frozen=True)
class ModelParams:
    """Parameter blocks for one model, keyed by block name.

    Linear family blocks: ``w`` (p,) and, when adaptive, ``D`` (p, |P|).
    Network blocks per hidden layer m: ``Wm`` (out, in), ``bm`` (out,) and,
    when adaptive, ``Dm`` (in, |P|); output blocks ``w_out`` (width,),
    ``b_out`` (1,) and ``D_out`` (width, |P|). Column j of every D block
    belongs to maskable[j].
    """

    family: str
    adaptive: bool
    n_features: int
    maskable: tuple[int, ...]
    bias_index: int | None
    arrays: dict[str, np.ndarray]

    @property
    def n_hidden_layers(self) -> int:
        return sum(1 for k in self.arrays if k.startswith("W") and k != "w_out")

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(self.arrays[f"W{m}"].shape[0] for m in range(self.n_hidden_layers))

    def block_names(self) -> list[str]:
        """Canonical block order used for vectorization and optimizer state."""
        if self.family == LR:
            names = ["w"]
            if self.adaptive:
                names.append("D")
            return names
        m_layers = self.n_hidden_layers
        names = []
        for m in range(m_layers):
            names += [f"W{m}", f"b{m}"]
        names += ["w_out", "b_out"]
        if self.adaptive:
            names += [f"D{m}" for m in range(m_layers)] + ["D_out"]
        return names

    def copy(self) -> "ModelParams":
        return replace(self, arrays={k: v.copy() for k, v in self.arrays.items()})

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in self.block_names()])

    def from_vector(self, vec: np.ndarray) -> "ModelParams":
        arrays = {}
        offset = 0
        for name in self.block_names():
            block = self.arrays[name]
            arrays[name] = vec[offset : offset + block.size].reshape(block.shape).copy()
            offset += block.size
        if offset != vec.size:
            raise DomainError("vector length does not match parameter count")
        return replace(self, arrays=arrays)


def init_params(
    arch: Architecture,
    family: str,
    adaptive: bool,
    seed: int,
    maskable: tuple[int, ...] = (),
) -> ModelParams:
    """Random initialization, deterministic per seed.

    Weight matrices draw from the scaled-uniform range +-sqrt(6/(fan_in +
    fan_out)); biases and every adaptive correction block start at exact
    zero, so an adaptive model is initially identical to its base model.
    """
    if family not in (LR, NN):
        raise ConfigError(f"unknown family {family!r}")
    if family == NN and not arch.hidden:
        raise ConfigError("network family needs at least one hidden layer")
    maskable = tuple(sorted(int(j) for j in maskable))
    n_mask = len(maskable)
    rng = np.random.default_rng(seed)
    p = arch.input_dim
    arrays: dict[str, np.ndarray] = {}
    if family == LR:
        bound = 1.0 / np.sqrt(p)
        arrays["w"] = rng.uniform(-bound, bound, size=p)
        if adaptive:
            arrays["D"] = np.zeros((p, n_mask))
    else:
        fan_in = p
        for m, width in enumerate(arch.hidden):
            bound = np.sqrt(6.0 / (fan_in + width))
            arrays[f"W{m}"] = rng.uniform(-bound, bound, size=(width, fan_in))
            arrays[f"b{m}"] = np.zeros(width)
            fan_in = width
        bound = np.sqrt(6.0 / (fan_in + 1))
        arrays["w_out"] = rng.uniform(-bound, bound, size=fan_in)
        arrays["b_out"] = np.zeros(1)
        if adaptive:
            in_dim = p
            for m, width in enumerate(arch.hidden):
                arrays[f"D{m}"] = np.zeros((in_dim, n_mask))
                in_dim = width
            arrays["D_out"] = np.zeros((fan_in, n_mask))
    return ModelParams(
        family=family,
        adaptive=adaptive,
        n_features=p,
        maskable=maskable,
        bias_index=arch.bias_index,
        arrays=arrays,
    )


def _bits_from(alpha, n_features: int) -> np.ndarray:
    if isinstance(alpha, MissingPattern):
        bits = alpha.bits
    else:
        bits = np.asarray(alpha, dtype=np.uint8)
    if bits.shape[-1] != n_features:
        raise DomainError("pattern length does not match feature count")
    return bits


def _check_support(bits: np.ndarray, params: ModelParams) -> None:
    outside = np.ones(params.n_features, dtype=bool)
    if params.maskable:
        outside[list(params.maskable)] = False
    flat = bits.reshape(-1, params.n_features)
    if np.any(flat[:, outside] == 1):
        raise DomainError("pattern marks a non-maskable feature as missing")


def _mask_columns(bits: np.ndarray, maskable: tuple[int, ...]) -> np.ndarray:
    """Restrict bits to the maskable coordinates, as float (n, |P|) or (|P|,)."""
    cols = list(maskable)
    return bits[..., cols].astype(np.float64)


def predict(params: ModelParams, X: np.ndarray, alpha) -> np.ndarray:
    """Batched prediction. alpha may be a single pattern shared by every row
    or an (n, p) bit matrix with one pattern per row."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    bits = _bits_from(alpha, params.n_features)
    _check_support(bits, params)
    per_row = bits.ndim == 2
    if per_row and bits.shape[0] != X.shape[0]:
        raise DomainError("per-row pattern count does not match batch size")
    xm = X * (1.0 - bits.astype(np.float64))
    if params.family == LR:
        preds = xm @ params.arrays["w"]
        if params.adaptive and params.maskable:
            a = _mask_columns(bits, params.maskable)
            d = params.arrays["D"]
            if per_row:
                preds = preds + np.einsum("ij,ij->i", xm, a @ d.T)
            else:
                preds = preds + xm @ (d @ a)
        return preds
    return _nn_forward(params, xm, bits, per_row)[0]


def forward(params: ModelParams, x: np.ndarray, alpha) -> float:
    """Single-observation prediction."""
    return float(predict(params, np.asarray(x, dtype=np.float64)[None, :], alpha)[0])


def _nn_forward(params: ModelParams, xm: np.ndarray, bits: np.ndarray, per_row: bool):
    """Forward pass; returns (predictions, cache) where the cache holds the
    layer inputs and pre-activations needed by backprop."""
    m_layers = params.n_hidden_layers
    adaptive = params.adaptive and bool(params.maskable)
    a = _mask_columns(bits, params.maskable) if adaptive else None
    g = xm
    inputs = []
    preacts = []
    for m in range(m_layers):
        w = params.arrays[f"W{m}"]
        b = params.arrays[f"b{m}"]
        z = g @ w.T + b
        if adaptive:
            d = params.arrays[f"D{m}"]
            if per_row:
                z = z + np.einsum("ij,ij->i", g, a @ d.T)[:, None]
            else:
                z = z + (g @ (d @ a))[:, None]
        inputs.append(g)
        preacts.append(z)
        g = z if m == 0 else np.maximum(z, 0.0)
    w_out = params.arrays["w_out"]
    preds = g @ w_out + params.arrays["b_out"][0]
    if adaptive:
        d_out = params.arrays["D_out"]
        if per_row:
            preds = preds + np.einsum("ij,ij->i", g, a @ d_out.T)
        else:
            preds = preds + g @ (d_out @ a)
    cache = (inputs, preacts, g, a)
    return preds, cache


def _decayed_mask(params: ModelParams, name: str) -> np.ndarray | float:
    """1 where the block enters the weight-decay penalty.

    Explicit network biases are excluded; for the linear family the weight on
    the constant bias feature is excluded. Adaptive correction blocks are
    always included.
    """
    if params.family == LR and name == "w" and params.bias_index is not None:
        mask = np.ones(params.n_features)
        mask[params.bias_index] = 0.0
        return mask
    if name.startswith("b"):
        return 0.0
    return 1.0


def mse_loss(params: ModelParams, X: np.ndarray, y: np.ndarray, alpha) -> float:
    """Plain mean squared error at the given pattern (no decay term); this is
    the quantity reported as validation loss and used for bounds."""
    preds = predict(params, X, alpha)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean((preds - y) ** 2))


def squared_errors(params: ModelParams, X: np.ndarray, y: np.ndarray, alpha) -> np.ndarray:
    preds = predict(params, X, alpha)
    return (preds - np.asarray(y, dtype=np.float64)) ** 2


def loss_and_grad(
    params: ModelParams,
    X: np.ndarray,
    y: np.ndarray,
    alpha,
    weight_decay: float = 0.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Training objective and exact gradients for every parameter block.

    The objective is mean squared error plus weight_decay times the sum of
    squared decayed weights (see _decayed_mask). One pattern applies to the
    whole batch, matching how training consumes adversarial scenarios.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise SizeError("empty batch")
    bits = _bits_from(alpha, params.n_features)
    if bits.ndim != 1:
        raise DomainError("training uses one pattern per batch")
    _check_support(bits, params)
    xm = X * (1.0 - bits.astype(np.float64))
    grads: dict[str, np.ndarray] = {}

    if params.family == LR:
        w = params.arrays["w"]
        adaptive = params.adaptive and bool(params.maskable)
        a = _mask_columns(bits, params.maskable) if adaptive else None
        w_eff = w + params.arrays["D"] @ a if adaptive else w
        preds = xm @ w_eff
        resid = preds - y
        loss = float(np.mean(resid**2))
        r = (2.0 / n) * resid
        gw = xm.T @ r
        grads["w"] = gw
        if params.adaptive:
            grads["D"] = np.outer(gw, a) if adaptive else np.zeros_like(params.arrays["D"])
    else:
        preds, (inputs, preacts, g_last, a) = _nn_forward(params, xm, bits, per_row=False)
        resid = preds - y
        loss = float(np.mean(resid**2))
        r = (2.0 / n) * resid
        adaptive = a is not None
        w_out = params.arrays["w_out"]
        grads["w_out"] = g_last.T @ r
        grads["b_out"] = np.array([r.sum()])
        if params.adaptive:
            grads["D_out"] = (
                np.outer(g_last.T @ r, a) if adaptive else np.zeros_like(params.arrays["D_out"])
            )
        w_eff = w_out + params.arrays["D_out"] @ a if adaptive else w_out
        dg = np.outer(r, w_eff)
        for m in range(params.n_hidden_layers - 1, -1, -1):
            delta = dg if m == 0 else dg * (preacts[m] > 0.0)
            g_in = inputs[m]
            grads[f"W{m}"] = delta.T @ g_in
            grads[f"b{m}"] = delta.sum(axis=0)
            w = params.arrays[f"W{m}"]
            if params.adaptive:
                if adaptive:
                    srow = delta.sum(axis=1)
                    grads[f"D{m}"] = np.outer(g_in.T @ srow, a)
                    dg = delta @ w + np.outer(srow, params.arrays[f"D{m}"] @ a)
                else:
                    grads[f"D{m}"] = np.zeros_like(params.arrays[f"D{m}"])
                    dg = delta @ w
            else:
                dg = delta @ w

    if weight_decay:
        for name in params.block_names():
            mask = _decayed_mask(params, name)
            block = params.arrays[name]
            loss += weight_decay * float(np.sum((block * mask) ** 2))
            grads[name] = grads[name] + 2.0 * weight_decay * (block * mask)

    return loss, grads


def params_to_json(params: ModelParams) -> dict:
    return {
        "family": params.family,
        "adaptive": params.adaptive,
        "n_features": params.n_features,
        "maskable": list(params.maskable),
        "bias_index": params.bias_index,
        "arrays": {name: array_to_json(params.arrays[name]) for name in params.block_names()},
    }


def params_from_json(obj: dict) -> ModelParams:
    return ModelParams(
        family=obj["family"],
        adaptive=obj["adaptive"],
        n_features=obj["n_features"],
        maskable=tuple(obj["maskable"]),
        bias_index=obj["bias_index"],
        arrays={k: array_from_json(v) for k, v in obj["arrays"].items()},
    )
