"""Dual-stage attention encoder-decoder LSTM (DARNN) for one-step load forecasting.

All learnable parameters live in one flat float64 vector ``theta``. A
:class:`ParamLayout` fixes the order of named blocks inside that vector: the
shared blocks come first, then the personalized ones, so that
``theta = [phi, psi]`` holds by construction.

Canonical block order (within the shared and the personal segment alike)::

    input_attn   W_state (H, 2H), W_key (H, T), b (H,), v (1, H)
    encoder.l    W (4H, in_l + H), b (4H,)          in_0 = n, in_l = H
    temporal_attn W_state (H, 2H), W_key (H, H), b (H,), v (1, H)
    decoder.l    W (4H, in_l + H), b (4H,)          in_0 = 1, in_l = H
    projection   w (1, H + 1), b (1,)
    head         W1 (H, 2H), b1 (H,), W2 (1, H), b2 (1,)

LSTM weight rows are stacked in gate order ``f, i, o, g`` and columns are
``[input | hidden]``; e.g. ``W_fx = W[0:H, :in]`` and ``W_gh = W[3H:4H, in:]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor

BLOCKS = ("input_attn", "encoder", "temporal_attn", "decoder", "projection", "head")
ENCODER_BLOCKS = ("input_attn", "encoder")
LAYOUT_VERSION = 1
_MAGIC = b"PPFLPARM"


class LayoutError(ValueError):
    """Raised for flat vectors or checkpoints that do not match a layout."""


@dataclass(frozen=True)
class DarnnConfig:
    n_features: int = 9
    window: int = 12
    hidden: int = 30
    n_layers: int = 2

    def __post_init__(self):
        for name in ("n_features", "window", "hidden", "n_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


class ParamEntry(NamedTuple):
    name: str
    block: str
    shape: tuple
    fan_in: int
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _block_entries(cfg: DarnnConfig, block: str):
    H, T, n = cfg.hidden, cfg.window, cfg.n_features
    if block in ("input_attn", "temporal_attn"):
        key = T if block == "input_attn" else H
        fan = 2 * H + key
        yield f"{block}.W_state", (H, 2 * H), fan
        yield f"{block}.W_key", (H, key), fan
        yield f"{block}.b", (H,), fan
        yield f"{block}.v", (1, H), H
    elif block in ("encoder", "decoder"):
        first = n if block == "encoder" else 1
        for layer in range(cfg.n_layers):
            width = (first if layer == 0 else H) + H
            yield f"{block}.{layer}.W", (4 * H, width), width
            yield f"{block}.{layer}.b", (4 * H,), width
    elif block == "projection":
        yield "projection.w", (1, H + 1), H + 1
        yield "projection.b", (1,), H + 1
    elif block == "head":
        yield "head.W1", (H, 2 * H), 2 * H
        yield "head.b1", (H,), 2 * H
        yield "head.W2", (1, H), H
        yield "head.b2", (1,), H


class ParamLayout:
    """Offsets of every named parameter inside ``theta = [phi, psi]``."""

    def __init__(self, config: DarnnConfig, shared_blocks=ENCODER_BLOCKS):
        unknown = set(shared_blocks) - set(BLOCKS)
        if unknown:
            raise ValueError(f"unknown blocks {sorted(unknown)}; expected a subset of {BLOCKS}")
        self.config = config
        self.shared_blocks = tuple(b for b in BLOCKS if b in shared_blocks)
        self.personal_blocks = tuple(b for b in BLOCKS if b not in shared_blocks)
        entries, offset = [], 0
        for block in self.shared_blocks + self.personal_blocks:
            for name, shape, fan in _block_entries(config, block):
                entries.append(ParamEntry(name, block, shape, fan, offset))
                offset += int(np.prod(shape))
        self.entries = entries
        self.size = offset
        self.n_shared = sum(e.size for e in entries if e.block in self.shared_blocks)
        self.n_personal = self.size - self.n_shared

    def __eq__(self, other):
        return (
            isinstance(other, ParamLayout)
            and self.config == other.config
            and self.shared_blocks == other.shared_blocks
        )

    def __repr__(self):
        return (
            f"ParamLayout(size={self.size}, shared={self.shared_blocks}, "
            f"n_shared={self.n_shared}, n_personal={self.n_personal})"
        )

    def _check(self, theta: np.ndarray, expected: int, what: str):
        if theta.ndim != 1 or theta.size != expected:
            raise LayoutError(f"{what} has {theta.size} values, layout expects {expected}")

    def partition(self, theta) -> tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=ad._dtype_of(theta))
        self._check(theta, self.size, "theta")
        return theta[: self.n_shared].copy(), theta[self.n_shared :].copy()

    def merge(self, phi, psi) -> np.ndarray:
        phi = np.asarray(phi, dtype=np.float64)
        psi = np.asarray(psi, dtype=np.float64)
        self._check(phi, self.n_shared, "phi")
        self._check(psi, self.n_personal, "psi")
        return np.concatenate([phi, psi])

    def views(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        self._check(theta, self.size, "theta")
        return {e.name: theta[e.offset : e.offset + e.size].reshape(e.shape) for e in self.entries}

    def initialize(self, rng: np.random.Generator, part: str = "all") -> np.ndarray:
        """Draw ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` for the requested segment.

        ``part`` is ``"shared"``, ``"personal"`` or ``"all"``; draws follow the
        layout order so a given generator state always yields the same vector.
        """
        if part == "shared":
            entries = [e for e in self.entries if e.block in self.shared_blocks]
        elif part == "personal":
            entries = [e for e in self.entries if e.block in self.personal_blocks]
        elif part == "all":
            entries = self.entries
        else:
            raise ValueError(f"part must be 'shared', 'personal' or 'all', got {part!r}")
        chunks = [rng.uniform(-1.0, 1.0, e.size) / np.sqrt(e.fan_in) for e in entries]
        return np.concatenate(chunks) if chunks else np.zeros(0)

    def describe(self) -> dict:
        return {
            "config": asdict(self.config),
            "shared_blocks": list(self.shared_blocks),
            "entries": [[e.name, list(e.shape)] for e in self.entries],
        }

    @classmethod
    def from_description(cls, desc: dict) -> "ParamLayout":
        layout = cls(DarnnConfig(**desc["config"]), desc["shared_blocks"])
        if [[e.name, list(e.shape)] for e in layout.entries] != desc["entries"]:
            raise LayoutError("dimension table does not match the rebuilt layout")
        return layout


# -- structured parameter views -----------------------------------------------


class LstmCellParams:
    """Stacked gate weights of one LSTM cell (rows ``f, i, o, g``)."""

    def __init__(self, W: Tensor, b: Tensor, input_size: int):
        self.W, self.b, self.input_size = W, b, input_size
        four_h = W.shape[0]
        if four_h % 4 or W.shape[1] != input_size + four_h // 4 or b.shape != (four_h,):
            raise ad.ShapeError(
                f"LSTM cell: weight {W.shape} / bias {b.shape} inconsistent with input size {input_size}"
            )
        self.hidden = four_h // 4

    @cached_property
    def operand(self) -> np.ndarray:
        return kernels.lstm_operand(self.W.data, self.b.data)

    def _block(self, gate: int, part: str) -> np.ndarray:
        H, n = self.hidden, self.input_size
        rows = self.W.data[gate * H : (gate + 1) * H]
        return rows[:, :n] if part == "x" else rows[:, n:]

    W_fx = property(lambda self: self._block(0, "x"))
    W_fh = property(lambda self: self._block(0, "h"))
    W_ix = property(lambda self: self._block(1, "x"))
    W_ih = property(lambda self: self._block(1, "h"))
    W_ox = property(lambda self: self._block(2, "x"))
    W_oh = property(lambda self: self._block(2, "h"))
    W_gx = property(lambda self: self._block(3, "x"))
    W_gh = property(lambda self: self._block(3, "h"))
    b_f = property(lambda self: self.b.data[: self.hidden])
    b_i = property(lambda self: self.b.data[self.hidden : 2 * self.hidden])
    b_o = property(lambda self: self.b.data[2 * self.hidden : 3 * self.hidden])
    b_g = property(lambda self: self.b.data[3 * self.hidden :])

    @classmethod
    def from_gates(cls, *, W_fx, W_fh, W_ix, W_ih, W_gx, W_gh, W_ox, W_oh, b_f, b_i, b_g, b_o,
                   requires_grad=False):
        W = np.block([[W_fx, W_fh], [W_ix, W_ih], [W_ox, W_oh], [W_gx, W_gh]])
        b = np.concatenate([b_f, b_i, b_o, b_g])
        return cls(Tensor(W, requires_grad), Tensor(b, requires_grad), np.shape(W_fx)[1])


class AttentionParams:
    """Two-layer tanh MLP scoring ``[h; c; key]``; first-layer weight split as ``[W_state | W_key]``."""

    def __init__(self, W_state: Tensor, W_key: Tensor, b: Tensor, v: Tensor):
        self.W_state, self.W_key, self.b, self.v = W_state, W_key, b, v

    @cached_property
    def operand(self) -> np.ndarray:
        return kernels.attention_operand(self.W_state.data, self.b.data)


class DarnnParams:
    """Tensor views of a flat parameter vector, grouped by model component."""

    def __init__(self, theta: np.ndarray, layout: ParamLayout, requires_grad: bool = False):
        self.layout = layout
        self.tensors = {
            name: Tensor(arr, requires_grad) for name, arr in layout.views(theta).items()
        }
        t, cfg = self.tensors, layout.config
        attn = ("W_state", "W_key", "b", "v")
        self.input_attn = AttentionParams(*(t[f"input_attn.{k}"] for k in attn))
        self.temporal_attn = AttentionParams(*(t[f"temporal_attn.{k}"] for k in attn))
        self.encoder = [
            LstmCellParams(t[f"encoder.{l}.W"], t[f"encoder.{l}.b"], cfg.n_features if l == 0 else cfg.hidden)
            for l in range(cfg.n_layers)
        ]
        self.decoder = [
            LstmCellParams(t[f"decoder.{l}.W"], t[f"decoder.{l}.b"], 1 if l == 0 else cfg.hidden)
            for l in range(cfg.n_layers)
        ]
        self.projection = (t["projection.w"], t["projection.b"])
        self.head = (t["head.W1"], t["head.b1"], t["head.W2"], t["head.b2"])

    def flat_grad(self) -> np.ndarray:
        """Concatenate leaf gradients in layout order (zeros where none flowed)."""
        out = np.zeros(self.layout.size)
        for e in self.layout.entries:
            g = self.tensors[e.name].grad
            if g is not None:
                out[e.offset : e.offset + e.size] = g.reshape(-1)
        return out


# -- forward pass -------------------------------------------------------------
#
# Internals run feature-major: activations are (features, B), recurrent state
# is packed as [h; c] (2H, B). The public functions below accept and return
# batch-major arrays.


def _check_cell_inputs(x: Tensor, h: Tensor, c: Tensor, p: LstmCellParams):
    H = p.hidden
    if x.shape[-1] != p.input_size or h.shape[-1] != H or c.shape[-1] != H:
        raise ad.ShapeError(
            f"LSTM cell expects input {p.input_size} / hidden {H}, got x {x.shape}, "
            f"h {h.shape}, c {c.shape}"
        )


def _as_columns(t: Tensor) -> Tensor:
    """(B, F) or (F,) to feature-major (F, B)."""
    return ad.reshape(t, (t.shape[0], 1)) if t.data.ndim == 1 else ad.transpose(t)


def _from_columns(t: Tensor, flat: bool) -> Tensor:
    return ad.reshape(t, (t.shape[0],)) if flat else ad.transpose(t)


def lstm_cell_forward(x, h_prev, c_prev, p: LstmCellParams) -> tuple[Tensor, Tensor]:
    """One LSTM step on (B, F) or (F,) inputs; returns ``(h, c)``."""
    x, h_prev, c_prev = ad._as_tensor(x), ad._as_tensor(h_prev), ad._as_tensor(c_prev)
    _check_cell_inputs(x, h_prev, c_prev, p)
    flat = x.data.ndim == 1
    hc = ad.concat([_as_columns(h_prev), _as_columns(c_prev)], axis=0)
    out = kernels.lstm_cell(_as_columns(x), hc, p.W, p.b, p.operand)
    H = p.hidden
    return (_from_columns(ad.take(out, 0, H, axis=0), flat),
            _from_columns(ad.take(out, H, 2 * H, axis=0), flat))


def lstm_cell_reference(x, h_prev, c_prev, p: LstmCellParams) -> tuple[Tensor, Tensor]:
    """The gate equations written out with basic primitives (batch-major)."""
    x, h_prev, c_prev = ad._as_tensor(x), ad._as_tensor(h_prev), ad._as_tensor(c_prev)
    _check_cell_inputs(x, h_prev, c_prev, p)
    H = p.hidden
    z = ad.affine(ad.concat([x, h_prev]), p.W, p.b)
    gates = ad.sigmoid(ad.take(z, 0, 3 * H))
    g = ad.tanh(ad.take(z, 3 * H, 4 * H))
    f = ad.take(gates, 0, H)
    i = ad.take(gates, H, 2 * H)
    o = ad.take(gates, 2 * H, 3 * H)
    c = ad.add(ad.hadamard(g, i), ad.hadamard(c_prev, f))
    h = ad.hadamard(ad.tanh(c), o)
    return h, c


def attention_keys(series, p: AttentionParams) -> Tensor:
    """Key half of the attention MLP's first layer.

    ``series`` is feature-major (K_in, K, B); the result is (A, K, B).
    """
    return ad.linear(p.W_key, series)


def attention_weights(h, c, keys: Tensor, p: AttentionParams) -> Tensor:
    """Softmax over K of ``v . tanh(W [h; c; key_k] + b)``.

    Batch-major: ``h``, ``c`` are (B, H), ``keys`` (B, K, A); returns (B, K).
    """
    hc = ad.concat([ad.transpose(h), ad.transpose(c)], axis=0)
    keys_fm = ad.transpose(keys, (2, 1, 0))
    return ad.transpose(kernels.additive_attention(hc, keys_fm, p.W_state, p.b, p.v, p.operand))


def attention_weights_reference(h, c, keys, p: AttentionParams) -> Tensor:
    query = ad.affine(ad.concat([h, c]), p.W_state, p.b)
    B, A = query.shape
    z = ad.tanh(ad.add(ad.reshape(query, (B, 1, A)), keys))
    logits = ad.affine(z, p.v)
    return ad.softmax(ad.reshape(logits, logits.shape[:-1]), axis=-1)


def attention_keys_reference(series, p: AttentionParams) -> Tensor:
    """Batch-major keys: ``series`` (B, K, K_in) to (B, K, A)."""
    return ad.affine(series, p.W_key)


def input_attention(h_e_prev, c_e_prev, X, p: AttentionParams) -> Tensor:
    """Feature weights alpha_t (B, n) scored from the per-feature series of ``X`` (B, T, n)."""
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] == 0:
        raise ad.ShapeError(f"input attention needs X of shape (B, T, n>0), got {X.shape}")
    keys = attention_keys(np.ascontiguousarray(X.transpose(1, 2, 0)), p)
    hc = ad.concat([ad.transpose(h_e_prev), ad.transpose(c_e_prev)], axis=0)
    return ad.transpose(kernels.additive_attention(hc, keys, p.W_state, p.b, p.v, p.operand))


def _zero_state(B: int, H: int) -> Tensor:
    return Tensor(np.zeros((2 * H, B)))


def _stacked_step(inp: Tensor, states: list, cells: list[LstmCellParams]) -> None:
    for layer, cell in enumerate(cells):
        if layer:
            inp = ad.take(states[layer - 1], 0, cell.input_size, axis=0)
        states[layer] = kernels.lstm_cell(inp, states[layer], cell.W, cell.b, cell.operand)


def _encode(XT: np.ndarray, cells: list[LstmCellParams], attn: AttentionParams, trace: dict | None) -> Tensor:
    """Feature-major encoder: ``XT`` is (T, n, B); returns H^e as (H, T, B)."""
    T, _, B = XT.shape
    H = cells[0].hidden
    states = [_zero_state(B, H) for _ in cells]
    keys = attention_keys(XT, attn)
    outputs = []
    for t in range(T):
        alpha = kernels.additive_attention(states[-1], keys, attn.W_state, attn.b, attn.v, attn.operand)
        if trace is not None:
            trace.setdefault("alpha", []).append(alpha.data.T)
        _stacked_step(ad.hadamard(alpha, XT[t]), states, cells)
        outputs.append(states[-1])
    return ad.take(ad.stack(outputs, axis=1), 0, H, axis=0)


def encoder_forward(X, cells: list[LstmCellParams], attn: AttentionParams, trace: dict | None = None) -> Tensor:
    """Encoder hidden states H^e of shape (B, T, H); top-layer states drive the attention."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] < 1:
        raise ad.ShapeError(f"encoder expects X of shape (B, T>=1, n), got {X.shape}")
    He = _encode(np.ascontiguousarray(X.transpose(1, 2, 0)), cells, attn, trace)
    return ad.transpose(He, (2, 1, 0))


def _context(beta: Tensor, He: Tensor) -> Tensor:
    """``H^e beta`` per sample: beta (T, B), He (H, T, B) to (H, B)."""
    return ad.sum(ad.hadamard(He, beta), axis=1)


def temporal_attention_step(h_d_prev, c_d_prev, He, y_t, attn: AttentionParams, projection: tuple):
    """Returns ``(beta_t, context, y_tilde)`` for one decoder step.

    Batch-major: ``He`` (B, T, H), ``y_t`` (B, 1); ``beta_t`` is (B, T),
    ``context = H^e beta_t`` (B, H) and ``y_tilde`` (B, 1).
    """
    He_fm = ad.transpose(ad._as_tensor(He), (2, 1, 0))
    keys = attention_keys(He_fm, attn)
    hc = ad.concat([ad.transpose(h_d_prev), ad.transpose(c_d_prev)], axis=0)
    beta = kernels.additive_attention(hc, keys, attn.W_state, attn.b, attn.v, attn.operand)
    context = _context(beta, He_fm)
    w_c, b_c = projection
    y_tilde = ad.linear(w_c, ad.concat([context, ad.transpose(ad._as_tensor(y_t))], axis=0), b_c)
    return ad.transpose(beta), ad.transpose(context), ad.transpose(y_tilde)


def _check_sample(X: np.ndarray, Y: np.ndarray, cfg: DarnnConfig):
    if X.ndim != 3 or Y.ndim != 2 or X.shape[:2] != Y.shape or X.shape[1:] != (cfg.window, cfg.n_features):
        raise ad.ShapeError(
            f"sample shapes X {X.shape}, Y {Y.shape} do not match window={cfg.window}, "
            f"n_features={cfg.n_features}"
        )


def darnn_forward(X, Y, params: DarnnParams, trace: dict | None = None) -> Tensor:
    """Forecast y_{T+L} for a batch: X (B, T, n) exogenous inputs, Y (B, T) past loads."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    cfg = params.layout.config
    _check_sample(X, Y, cfg)
    B, T, _ = X.shape
    H = cfg.hidden
    He = _encode(np.ascontiguousarray(X.transpose(1, 2, 0)), params.encoder, params.input_attn, trace)
    YT = np.ascontiguousarray(Y.T)
    attn = params.temporal_attn
    w_c, b_c = params.projection
    keys = attention_keys(He, attn)
    states = [_zero_state(B, H) for _ in params.decoder]
    context = None
    for t in range(T):
        beta = kernels.additive_attention(states[-1], keys, attn.W_state, attn.b, attn.v, attn.operand)
        if trace is not None:
            trace.setdefault("beta", []).append(beta.data.T)
        context = _context(beta, He)
        y_tilde = ad.linear(w_c, ad.concat([context, YT[t : t + 1]], axis=0), b_c)
        _stacked_step(y_tilde, states, params.decoder)
    W1, b1, W2, b2 = params.head
    top = ad.take(states[-1], 0, H, axis=0)
    hidden = ad.relu(ad.linear(W1, ad.concat([top, context], axis=0), b1))
    return ad.reshape(ad.linear(W2, hidden, b2), (B,))


def darnn_forward_reference(X, Y, params: DarnnParams) -> Tensor:
    """Batch-major forward built only from basic primitives; slow, used as an oracle."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    cfg = params.layout.config
    _check_sample(X, Y, cfg)
    B, T, _ = X.shape
    H = cfg.hidden
    zeros = Tensor(np.zeros((B, H)))
    hs, cs = [zeros] * cfg.n_layers, [zeros] * cfg.n_layers
    in_keys = attention_keys_reference(X.transpose(0, 2, 1), params.input_attn)
    outputs = []
    for t in range(T):
        alpha = attention_weights_reference(hs[-1], cs[-1], in_keys, params.input_attn)
        inp = ad.hadamard(alpha, X[:, t, :])
        for layer, cell in enumerate(params.encoder):
            hs[layer], cs[layer] = lstm_cell_reference(inp, hs[layer], cs[layer], cell)
            inp = hs[layer]
        outputs.append(hs[-1])
    He = ad.stack(outputs, axis=1)
    tmp_keys = attention_keys_reference(He, params.temporal_attn)
    hs, cs = [zeros] * cfg.n_layers, [zeros] * cfg.n_layers
    w_c, b_c = params.projection
    context = None
    for t in range(T):
        beta = attention_weights_reference(hs[-1], cs[-1], tmp_keys, params.temporal_attn)
        context = ad.sum(ad.hadamard(ad.reshape(beta, (B, T, 1)), He), axis=1)
        inp = ad.affine(ad.concat([context, Y[:, t : t + 1]]), w_c, b_c)
        for layer, cell in enumerate(params.decoder):
            hs[layer], cs[layer] = lstm_cell_reference(inp, hs[layer], cs[layer], cell)
            inp = hs[layer]
    W1, b1, W2, b2 = params.head
    hidden = ad.relu(ad.affine(ad.concat([hs[-1], context]), W1, b1))
    return ad.reshape(ad.affine(hidden, W2, b2), (B,))


def loss(y_hat, y):
    """Squared forecast error ``(y_hat - y)**2``; works on floats and Tensors."""
    if isinstance(y_hat, Tensor):
        d = ad.sub(y_hat, y)
        return ad.hadamard(d, d)
    return (y_hat - y) ** 2


def batch_loss(y_hat: Tensor, target) -> Tensor:
    """Mean squared error over the batch."""
    target = np.asarray(target, dtype=np.float64)
    return ad.scale(ad.sum(loss(y_hat, target)), 1.0 / target.size)


def loss_and_grad(theta: np.ndarray, layout: ParamLayout, X, Y, target) -> tuple[float, np.ndarray]:
    params = DarnnParams(theta, layout, requires_grad=True)
    with ad.Tape() as tape:
        value = batch_loss(darnn_forward(X, Y, params), target)
        tape.backward(value)
    return float(value.data), params.flat_grad()


def predict(theta: np.ndarray, layout: ParamLayout, X, Y, chunk: int = 2048) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 2:
        return predict(theta, layout, X[None], Y[None], chunk)
    params = DarnnParams(theta, layout)
    out = [darnn_forward(X[i : i + chunk], Y[i : i + chunk], params).data for i in range(0, len(X), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


# -- serialization ------------------------------------------------------------


def _part_size(layout: ParamLayout, part: str) -> int:
    sizes = {"all": layout.size, "shared": layout.n_shared, "personal": layout.n_personal}
    if part not in sizes:
        raise ValueError(f"part must be one of {sorted(sizes)}, got {part!r}")
    return sizes[part]


def save_params(path, values: np.ndarray, layout: ParamLayout, meta: dict | None = None,
                part: str = "all") -> None:
    """Write a parameter vector as little-endian float64 behind a versioned JSON header.

    ``part`` says whether ``values`` is all of theta or only its shared or
    personal segment.
    """
    values = np.asarray(values, dtype="<f8")
    expected = _part_size(layout, part)
    if values.ndim != 1 or values.size != expected:
        raise LayoutError(f"{part} vector has {values.size} values, layout expects {expected}")
    header = json.dumps({"layout": layout.describe(), "meta": meta or {}, "part": part}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", LAYOUT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", values.size))
        fh.write(values.tobytes())


def load_params(path) -> tuple[np.ndarray, ParamLayout, dict]:
    """Read a file written by :func:`save_params`; ``meta["part"]`` names the segment."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise LayoutError(f"{path}: cannot read ({exc.strerror})") from None
    if raw[: len(_MAGIC)] != _MAGIC:
        raise LayoutError(f"{path}: not a parameter file")
    pos = len(_MAGIC)
    if len(raw) < pos + 8:
        raise LayoutError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, pos)
    if version != LAYOUT_VERSION:
        raise LayoutError(f"{path}: layout version {version}, expected {LAYOUT_VERSION}")
    pos += 8
    if len(raw) < pos + hlen + 8:
        raise LayoutError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos : pos + hlen])
    except ValueError:
        raise LayoutError(f"{path}: corrupt header") from None
    pos += hlen
    (count,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) - pos != 8 * count:
        raise LayoutError(f"{path}: expected {count} values, found {(len(raw) - pos) // 8}")
    try:
        layout = ParamLayout.from_description(header["layout"])
    except (KeyError, TypeError, ValueError) as exc:
        raise LayoutError(f"{path}: unusable layout description ({exc})") from None
    part = header.get("part", "all")
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64)
    if values.size != _part_size(layout, part):
        raise LayoutError(f"{path}: {values.size} values for the {part} segment of {layout!r}")
    return values, layout, {**header["meta"], "part": part}
