"""Fused tape primitives for the model's two hot spots.

Each kernel computes what the corresponding composition of basic primitives
in :mod:`ppfl.model` computes, but records a single tape node with a
hand-derived backward. The composed versions stay available as reference
implementations and the test-suite checks the two against each other.

Kernels work feature-major: activations are (features, B) so that gate and
state blocks are contiguous rows. Recurrent state is packed as
``hc = [h; c]`` of shape (2H, B).
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, _as_tensor, _record


def lstm_operand(W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward operand ``[W | b]`` with the sigmoid-gate rows halved.

    With it, ``tanh(operand @ [x; h; 1])`` yields ``tanh(z/2)`` for the
    ``f, i, o`` rows and ``tanh(z)`` for ``g``, and
    ``sigmoid(z) = (1 + tanh(z/2)) / 2``.
    """
    H = W.shape[0] // 4
    op = np.concatenate([W, b[:, None]], axis=1)
    op[: 3 * H] *= 0.5
    return op


def lstm_cell(x, hc, W: Tensor, b: Tensor, operand: np.ndarray | None = None) -> Tensor:
    """Fused LSTM step on packed state; returns ``[h_new; c_new]`` (2H, B).

    ``x`` is (in, B). ``W`` is (4H, in + H) with gate rows ``f, i, o, g``.
    ``operand`` may carry a cached :func:`lstm_operand` of ``(W, b)``.
    """
    x, hc = _as_tensor(x), _as_tensor(hc)
    H = W.shape[0] // 4
    n_in = W.shape[1] - H
    if x.data.ndim != 2 or x.shape[0] != n_in or hc.shape != (2 * H, x.shape[1]) or b.shape != (4 * H,):
        raise ShapeError(
            f"lstm_cell: x {x.shape} and state {hc.shape} do not conform to W {W.shape}, b {b.shape}"
        )
    if operand is None:
        operand = lstm_operand(W.data, b.data)
    hcd = hc.data
    B = hcd.shape[1]
    xh = np.concatenate((x.data, hcd[:H], np.ones((1, B))))
    a = operand @ xh
    np.tanh(a, out=a)
    s = a[: 3 * H]
    s *= 0.5
    s += 0.5
    f, i, o, gt = a[:H], a[H : 2 * H], a[2 * H : 3 * H], a[3 * H :]
    c_prev = hcd[H:]
    out = np.empty(hcd.shape, dtype=a.dtype)
    c_new = out[H:]
    np.multiply(gt, i, out=c_new)
    c_new += c_prev * f
    tc = np.tanh(c_new)
    np.multiply(tc, o, out=out[:H])
    Wd = W.data

    def fn(grad):
        gh = grad[:H]
        dc = tc * tc
        np.subtract(1.0, dc, out=dc)
        dc *= gh
        dc *= o
        dc += grad[H:]
        # derivative of each activation given its output
        dz = a * a
        np.subtract(s, dz[: 3 * H], out=dz[: 3 * H])
        np.subtract(1.0, dz[3 * H :], out=dz[3 * H :])
        dz[:H] *= dc
        dz[:H] *= c_prev
        dz[H : 2 * H] *= dc
        dz[H : 2 * H] *= gt
        dz[2 * H : 3 * H] *= gh
        dz[2 * H : 3 * H] *= tc
        dz[3 * H :] *= dc
        dz[3 * H :] *= i
        dxh = Wd.T @ dz
        dWb = dz @ xh.T
        dhc = np.empty(hcd.shape, dtype=dxh.dtype)
        dhc[:H] = dxh[n_in:]
        np.multiply(dc, f, out=dhc[H:])
        return dxh[:n_in], dhc, dWb[:, :-1], dWb[:, -1]

    return _record(out, (x, hc, W, b), fn)


def attention_operand(W_state: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward operand ``[W_state | b]`` for :func:`additive_attention`."""
    return np.concatenate([W_state, b[:, None]], axis=1)


def additive_attention(hc, keys: Tensor, W_state: Tensor, b: Tensor, v: Tensor,
                       operand: np.ndarray | None = None) -> Tensor:
    """``softmax_k(v . tanh(W_state hc + b + keys[:, k]))`` with shape (K, B).

    ``hc`` is the packed query state (2H, B); ``keys`` is (A, K, B).
    """
    hc, keys = _as_tensor(hc), _as_tensor(keys)
    A = W_state.shape[0]
    if (hc.data.ndim != 2 or keys.data.ndim != 3 or hc.shape[0] != W_state.shape[1]
            or keys.shape[0] != A or keys.shape[2] != hc.shape[1] or v.shape != (1, A) or b.shape != (A,)):
        raise ShapeError(
            f"additive_attention: state {hc.shape} / keys {keys.shape} do not conform to "
            f"W_state {W_state.shape}, b {b.shape}, v {v.shape}"
        )
    if operand is None:
        operand = attention_operand(W_state.data, b.data)
    _, K, B = keys.shape
    hc1 = np.concatenate((hc.data, np.ones((1, B))))
    q = operand @ hc1
    z = keys.data + q[:, None, :]
    np.tanh(z, out=z)
    z2 = z.reshape(A, K * B)
    vd = v.data[0]
    s = (vd @ z2).reshape(K, B)
    s -= s.max(axis=0)
    np.exp(s, out=s)
    s /= s.sum(axis=0)
    Wd = W_state.data

    def fn(g):
        dlog = g * s
        dlog -= s * dlog.sum(axis=0)
        dv = z2 @ dlog.reshape(-1)
        da = z * z
        np.subtract(1.0, da, out=da)
        da *= dlog
        da *= vd[:, None, None]
        dq = da.sum(axis=1)
        dWb = dq @ hc1.T
        return Wd.T @ dq, da, dWb[:, :-1], dWb[:, -1], dv[None, :]

    return _record(s, (hc, keys, W_state, b, v), fn)
