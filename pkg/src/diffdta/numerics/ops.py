"""Forward ops with hand-written backward rules.

Sequence tensors are laid out (batch, length, channels); latent and feature
tensors (batch, features). Every op validates shapes up front and names
itself in the error so pipeline bugs surface at the offending layer.
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from .tensor import Tensor, as_tensor, make_op


def embed_lookup(table: Tensor, tokens: np.ndarray) -> Tensor:
    """Gather embedding rows for an integer token array.

    tokens: (B, L) with values in [0, rows); row 0 is the padding row and
    is learned like any other.
    """
    tokens = np.asarray(tokens)
    rows = table.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= rows):
        raise ValueError(
            f"embed_lookup: token id out of range [0, {rows}) "
            f"(min {int(tokens.min())}, max {int(tokens.max())})")
    out = make_op(table.data[tokens], (table,))
    if out._parents:
        flat_idx = tokens.reshape(-1)
        def bwd(g):
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            kernels.scatter_add_rows(
                table.grad, flat_idx, g.reshape(-1, table.shape[1]))
        out._backward = bwd
    return out


# above this many window elements conv1d stays with the k-loop GEMMs
# instead of materializing the im2col buffer (K times the input size)
_CONV_IM2COL_BUDGET = 48_000_000


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 1-D convolution with same-length zero padding.

    x: (B, L, Cin), w: (K, Cin, Cout), b: (Cout,). The output position i
    sees x[i - pl .. i - pl + K - 1] with pl = (K - 1) // 2, so a kernel
    whose only nonzero tap is a 1 at index pl is the identity.

    Small/medium batches run one fused im2col GEMM; beyond the memory
    budget the op falls back to K accumulated GEMMs over padded slices
    (identical arithmetic per tap, no K-fold buffer).
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d: need x (B,L,Cin) and w (K,Cin,Cout), got {x.shape}, {w.shape}")
    B, L, cin = x.shape
    K, cin_w, cout = w.shape
    if cin != cin_w or b.shape != (cout,):
        raise ValueError(
            f"conv1d: shapes disagree, x {x.shape}, w {w.shape}, b {b.shape}")
    pl = (K - 1) // 2
    xp = np.zeros((B, L + K - 1, cin), dtype=x.dtype)
    xp[:, pl:pl + L] = x.data
    fused = B * L * K * cin <= _CONV_IM2COL_BUDGET

    if fused:
        # windows[b, i, j, c] = xp[b, i + j, c]
        windows = np.lib.stride_tricks.sliding_window_view(xp, K, axis=1)
        cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(B * L, K * cin)
        out_data = (cols @ w.data.reshape(K * cin, cout)).reshape(B, L, cout)
        out_data += b.data
    else:
        out_data = xp[:, 0:L] @ w.data[0]
        for j in range(1, K):
            out_data += xp[:, j:j + L] @ w.data[j]
        out_data += b.data

    out = make_op(out_data, (x, w, b))
    if out._parents:
        def bwd(g):
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=(0, 1)))
            g2 = g.reshape(B * L, cout)
            if w.requires_grad:
                if fused:
                    w.accumulate_grad((cols.T @ g2).reshape(K, cin, cout))
                else:
                    gw = np.empty_like(w.data)
                    for j in range(K):
                        gw[j] = xp[:, j:j + L].reshape(B * L, cin).T @ g2
                    w.accumulate_grad(gw)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                if fused:
                    gcols = (g2 @ w.data.reshape(K * cin, cout).T).reshape(B, L, K, cin)
                    for j in range(K):
                        gxp[:, j:j + L] += gcols[:, :, j]
                else:
                    for j in range(K):
                        gxp[:, j:j + L] += g @ w.data[j].T
                x.accumulate_grad(gxp[:, pl:pl + L])
        out._backward = bwd
    return out


def glu(x: Tensor) -> Tensor:
    """Gated linear unit: split channels in half, return a * sigmoid(b).

    Fused primitive: the composed slice/sigmoid/mul graph would allocate
    five full-width intermediates on the hottest path in the net.
    """
    c = x.shape[-1]
    if c % 2 != 0:
        raise ValueError(f"glu: channel count must be even, got shape {x.shape}")
    h = c // 2
    a = x.data[..., :h]
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data[..., h:]))
    out = make_op(a * s, (x,))
    if out._parents:
        def bwd(g):
            gx = np.empty_like(x.data)
            gx[..., :h] = g * s
            gx[..., h:] = g * a * s * (1.0 - s)
            x.accumulate_grad(gx)
        out._backward = bwd
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing (channel) axis, then affine."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = make_op(xhat * gamma.data + beta.data, (x, gamma, beta))
    if out._parents:
        def bwd(g):
            reduce_axes = tuple(range(g.ndim - 1))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=reduce_axes))
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=reduce_axes))
            if x.requires_grad:
                gx = g * gamma.data
                x.accumulate_grad(inv * (
                    gx
                    - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
        out._backward = bwd
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: scale by 1/keep at train time, identity in eval."""
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    keep = 1.0 - rate
    scale = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    out = make_op(x.data * scale, (x,))
    if out._parents:
        out._backward = lambda g: x.accumulate_grad(g * scale)
    return out


def global_max_pool(x: Tensor) -> Tensor:
    """Max over the length axis of (B, L, C); gradient routes to the argmax."""
    if x.ndim != 3:
        raise ValueError(f"global_max_pool: need (B, L, C), got {x.shape}")
    idx = x.data.argmax(axis=1)
    out = make_op(x.data.max(axis=1), (x,))
    if out._parents:
        def bwd(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx[:, None, :], g[:, None, :], axis=1)
            x.accumulate_grad(gx)
        out._backward = bwd
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the trailing feature axis."""
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(
            f"linear: shapes disagree, x {x.shape}, w {w.shape}, b {b.shape}")
    return x.matmul(w) + b


def relu(x: Tensor) -> Tensor:
    return x.relu()


def residual_add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ValueError(f"residual_add: shapes disagree, {x.shape} vs {y.shape}")
    return x + y


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along an axis; backward splits the gradient."""
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    out = make_op(np.concatenate(datas, axis=axis), tuple(tensors))
    if out._parents:
        sizes = [d.shape[axis] for d in datas]
        offsets = np.cumsum([0] + sizes)
        def bwd(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    t.accumulate_grad(g[tuple(sl)])
        out._backward = bwd
    return out


def sinusoidal_time_embed(steps: np.ndarray, dim: int, dtype=np.float32) -> Tensor:
    """Classic sin/cos positional features of integer steps.

    For embedding width E the i-th frequency is 10000^(-2i/E); the output
    concatenates the sin half then the cos half. Constant w.r.t. gradients.
    """
    if dim % 2 != 0:
        raise ValueError(f"sinusoidal_time_embed: dim must be even, got {dim}")
    steps = np.asarray(steps, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    ang = steps[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)
    return Tensor(emb)


def film_modulate(h: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Feature-wise affine conditioning: scale * h + shift.

    scale/shift are (B, C); when h carries a length axis (B, L, C) they
    broadcast over it.
    """
    scale = as_tensor(scale)
    shift = as_tensor(shift)
    if scale.shape != shift.shape:
        raise ValueError(
            f"film_modulate: scale {scale.shape} and shift {shift.shape} disagree")
    if h.ndim == scale.ndim + 1:
        scale = scale.reshape(scale.shape[0], 1, scale.shape[1])
        shift = shift.reshape(shift.shape[0], 1, shift.shape[1])
    if h.shape[-1] != scale.shape[-1] or h.shape[0] != scale.shape[0]:
        raise ValueError(
            f"film_modulate: h {h.shape} incompatible with conditioning {scale.shape}")
    return scale * h + shift
