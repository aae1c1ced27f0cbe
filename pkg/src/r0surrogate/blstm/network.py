"""LSTM encoder + dropout MLP head with hand-written backpropagation through time.

Parameters live in a plain dict of arrays. Gate weights are stacked gate-major
in the order ``(input, forget, output, candidate)``: ``Wx`` is ``(4, F, H)``,
``Wh`` is ``(4, H, H)`` and ``b`` is ``(4, H)``. Activations are kept
time-major, ``(T, 4, B, H)``, so every elementwise op runs on contiguous
blocks. Batches are processed in chunks of ``CHUNK`` sequences, which keeps
the working set in cache; gradients of a batch are the chunk gradients summed
in chunk order.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor

import numba as nb
import numpy as np

from ..parallel import worker_count

CHUNK = 256
GATES = ("input", "forget", "output", "candidate")


def init_params(n_features: int, hidden: int, head_sizes, rng: np.random.Generator,
                dtype=np.float32) -> dict:
    """Glorot-uniform input and head weights, orthogonal recurrent weights, forget bias 1."""
    def glorot(fan_in, fan_out, shape=None):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))

    params = {
        "Wx": glorot(n_features, 4 * hidden, (4, n_features, hidden)),
        "Wh": np.stack([np.linalg.qr(rng.standard_normal((hidden, hidden)))[0] for _ in range(4)]),
        "b": np.zeros((4, hidden)),
    }
    params["b"][1] = 1.0
    sizes = [hidden] + list(head_sizes) + [1]
    for k in range(len(sizes) - 1):
        params[f"W{k}"] = glorot(sizes[k], sizes[k + 1])
        params[f"c{k}"] = np.zeros(sizes[k + 1])
    return {k: np.ascontiguousarray(v, dtype=dtype) for k, v in params.items()}


def n_head_layers(params: dict) -> int:
    return sum(1 for k in params if k.startswith("W") and k[1:].isdigit())


def dropout_sizes(params: dict) -> list[int]:
    """Widths of the dropout sites: encoder output, then each hidden head layer."""
    return [params["Wh"].shape[1]] + [params[f"W{k}"].shape[1]
                                      for k in range(n_head_layers(params) - 1)]


def dropout_masks(rng: np.random.Generator, batch: int, params: dict, p: float, dtype=np.float32):
    """Inverted-dropout masks (kept units scaled by 1/(1-p)); ``None`` when ``p == 0``."""
    if p <= 0:
        return None
    scale = 1.0 / (1.0 - p)
    return [((rng.random((batch, s)) >= p) * scale).astype(dtype) for s in dropout_sizes(params)]


_local = threading.local()


def _buffer(name, shape, dtype):
    """Per-thread scratch array, reallocated only when the shape changes."""
    store = getattr(_local, "store", None)
    if store is None:
        store = _local.store = {}
    arr = store.get(name)
    if arr is None or arr.shape != shape or arr.dtype != dtype:
        arr = store[name] = np.empty(shape, dtype)
    return arr


@nb.njit(cache=True, nogil=True)
def _add_recurrent(g, z):
    """``g += z``, with the three sigmoid gates halved ahead of ``tanh``. Shapes ``(4, n)``."""
    half = g.dtype.type(0.5)
    for j in range(3):
        for k in range(g.shape[1]):
            g[j, k] = (g[j, k] + z[j, k]) * half
    for k in range(g.shape[1]):
        g[3, k] += z[3, k]


@nb.njit(cache=True, nogil=True)
def _cell_state(g, c_prev, c_next):
    """Finish sigmoid(x) = (1 + tanh(x / 2)) / 2 in place and step the cell state."""
    half = g.dtype.type(0.5)
    for k in range(c_prev.shape[0]):
        i = half + half * g[0, k]
        f = half + half * g[1, k]
        g[0, k] = i
        g[1, k] = f
        g[2, k] = half + half * g[2, k]
        c_next[k] = f * c_prev[k] + i * g[3, k]


@nb.njit(cache=True, nogil=True)
def _cell_backward(gt, tc, c_prev, dh, dc, dz):
    """Gate gradients ``dz`` of one step; ``dc`` is carried to the previous step in place.

    Arrays are flattened over (batch, hidden): ``gt`` and ``dz`` are ``(4, B*H)``.
    """
    one = dh.dtype.type(1.0)
    for k in range(dh.shape[0]):
        i, f, o, cand = gt[0, k], gt[1, k], gt[2, k], gt[3, k]
        t = tc[k]
        d_c = dc[k] + dh[k] * o * (one - t * t)
        dz[0, k] = d_c * cand * i * (one - i)
        dz[1, k] = d_c * c_prev[k] * f * (one - f)
        dz[2, k] = dh[k] * t * o * (one - o)
        dz[3, k] = d_c * i * (one - cand * cand)
        dc[k] = d_c * f


def _encode_chunk(params, xt, cache):
    """LSTM over time-major ``xt`` ``(T, B, F)``. Fills ``cache`` when given."""
    T, B, _ = xt.shape
    H = params["Wh"].shape[1]
    dt = xt.dtype
    Wx, Wh, b = params["Wx"], params["Wh"], params["b"]
    gates = cache["gates"] if cache is not None else _buffer("enc_gates", (T, 4, B, H), dt)
    for k in range(4):
        np.matmul(xt, Wx[k], out=gates[:, k])
        gates[:, k] += b[k]
    z = _buffer("enc_z", (4, B, H), dt)
    if cache is not None:
        cs, hs, tcs = cache["c"], cache["h"], cache["tanh_c"]
    else:
        cs = _buffer("enc_c", (2, B, H), dt)
        hs = _buffer("enc_h", (2, B, H), dt)
        tcs = _buffer("enc_tc", (1, B, H), dt)
    cs[0] = 0.0
    hs[0] = 0.0
    for t in range(T):
        cur, nxt = (t, t + 1) if cache is not None else (t % 2, (t + 1) % 2)
        g = gates[t].reshape(4, B * H)
        np.matmul(hs[cur], Wh, out=z)
        _add_recurrent(g, z.reshape(4, B * H))
        np.tanh(g, out=g)
        _cell_state(g, cs[cur].reshape(-1), cs[nxt].reshape(-1))
        tc = tcs[t] if cache is not None else tcs[0]
        np.tanh(cs[nxt], out=tc)
        np.multiply(gates[t, 2], tc, out=hs[nxt])
    return hs[T if cache is not None else T % 2].copy()


def time_major(x) -> np.ndarray:
    """``(B, T, F)`` -> contiguous ``(T, B, F)``."""
    return np.ascontiguousarray(np.asarray(x).transpose(1, 0, 2))


def encode(params: dict, xt: np.ndarray) -> np.ndarray:
    """Final hidden state ``(B, H)`` for time-major inputs ``xt`` of shape ``(T, B, F)``."""
    dt = params["Wh"].dtype
    B = xt.shape[1]
    out = np.empty((B, params["Wh"].shape[1]), dt)
    for lo in range(0, B, CHUNK):
        out[lo:lo + CHUNK] = _encode_chunk(params, np.ascontiguousarray(xt[:, lo:lo + CHUNK], dt),
                                           None)
    return out


def head(params: dict, h: np.ndarray, masks=None, keep_cache: bool = False):
    """Dropout -> (affine + ReLU -> dropout)* -> affine scalar output."""
    L = n_head_layers(params)
    a = h if masks is None else h * masks[0]
    acts, pre = [a], []
    for k in range(L):
        z = a @ params[f"W{k}"]
        z += params[f"c{k}"]
        if k < L - 1:
            pre.append(z)
            a = np.maximum(z, 0.0)
            if masks is not None:
                a = a * masks[k + 1]
            acts.append(a)
        else:
            a = z
    out = a[:, 0]
    return (out, acts, pre) if keep_cache else out


def forward(params: dict, xt: np.ndarray, masks=None) -> np.ndarray:
    return head(params, encode(params, xt), masks)


def _chunk_grads(params, xt, y, masks, scale):
    """Sum of ``scale * (out - y)**2`` over the chunk and its parameter gradients."""
    T, B = xt.shape[0], xt.shape[1]
    H = params["Wh"].shape[1]
    dt = params["Wh"].dtype
    L = n_head_layers(params)
    xt = np.ascontiguousarray(xt, dt)
    cache = {"gates": _buffer("gates", (T, 4, B, H), dt), "c": _buffer("c", (T + 1, B, H), dt),
             "h": _buffer("h", (T + 1, B, H), dt), "tanh_c": _buffer("tanh_c", (T, B, H), dt)}
    h_last = _encode_chunk(params, xt, cache)
    out, acts, pre = head(params, h_last, masks, keep_cache=True)
    diff = out - y
    sse = float(np.sum(diff.astype(np.float64) ** 2)) * scale

    grads = {}
    d = (2.0 * scale * diff[:, None]).astype(dt)
    for k in range(L - 1, -1, -1):
        grads[f"W{k}"] = acts[k].T @ d
        grads[f"c{k}"] = d.sum(axis=0)
        d = d @ params[f"W{k}"].T
        if k > 0:
            if masks is not None:
                d *= masks[k]
            d *= pre[k - 1] > 0
    if masks is not None:
        d *= masks[0]
    dh = np.ascontiguousarray(d, dtype=dt)

    gates_all, cs, tcs = cache["gates"], cache["c"], cache["tanh_c"]
    WhT = np.ascontiguousarray(params["Wh"].transpose(0, 2, 1))
    dz_all = _buffer("dz", (4, T, B, H), dt)
    dc = _buffer("dc", (B, H), dt)
    dc[...] = 0.0
    dh_parts = _buffer("dh_parts", (4, B, H), dt)
    for t in range(T - 1, -1, -1):
        dz = dz_all[:, t]
        _cell_backward(gates_all[t].reshape(4, B * H), tcs[t].reshape(-1), cs[t].reshape(-1),
                       dh.reshape(-1), dc.reshape(-1), dz.reshape(4, B * H))
        np.matmul(dz, WhT, out=dh_parts)
        np.sum(dh_parts, axis=0, out=dh)
    h_prev = cache["h"][:T].reshape(T * B, H)
    x_flat = xt.reshape(T * B, -1)
    dz_gate = dz_all.reshape(4, T * B, H)
    grads["Wh"] = np.stack([h_prev.T @ dz_gate[k] for k in range(4)])
    grads["Wx"] = np.stack([x_flat.T @ dz_gate[k] for k in range(4)])
    ones = np.ones(T * B, dt)
    grads["b"] = np.stack([ones @ dz_gate[k] for k in range(4)])
    return sse, grads


def loss_and_grads(params: dict, xt: np.ndarray, y: np.ndarray, masks=None, pool=None):
    """Batch mean squared error and its gradient w.r.t. every parameter.

    ``xt`` is time-major ``(T, B, F)``. ``pool`` is an optional executor; chunk
    gradients are summed in chunk order so the result does not depend on it.
    """
    B = xt.shape[1]
    dt = params["Wh"].dtype
    y = np.asarray(y, dt)
    scale = 1.0 / B
    spans = [(lo, min(lo + CHUNK, B)) for lo in range(0, B, CHUNK)]

    def job(span):
        lo, hi = span
        m = None if masks is None else [mk[lo:hi] for mk in masks]
        return _chunk_grads(params, xt[:, lo:hi], y[lo:hi], m, scale)

    parts = list(pool.map(job, spans)) if pool is not None else [job(s) for s in spans]
    loss = sum(p[0] for p in parts)
    grads = parts[0][1]
    for _, g in parts[1:]:
        for k in grads:
            grads[k] += g[k]
    return loss, grads


def make_pool(threads: int):
    threads = worker_count(threads)
    return ThreadPoolExecutor(max_workers=threads) if threads > 1 else None


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        m_hat = 1.0 / (1.0 - b1 ** self.t)
        v_hat = 1.0 / (1.0 - b2 ** self.t)
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            params[k] -= self.lr * (m * m_hat) / (np.sqrt(v * v_hat) + self.eps)


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
