"""Pure-numpy reference implementations of the hot kernels.

These define the semantics the compiled extension must match. They are also the
import-time fallback when the compiled module is unavailable, and the slow side
of the kernel benchmark. GEMMs are not here: both backends leave matrix products
to BLAS via numpy; these kernels cover the gather/scatter/transform/elementwise
work around them.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view

# ---------------------------------------------------------------------------
# Winograd F(4x4, 3x3) transform matrices (stride-1 3x3 convolution).

WINO_BT = np.array(
    [
        [4, 0, -5, 0, 1, 0],
        [0, -4, -4, 1, 1, 0],
        [0, 4, -4, -1, 1, 0],
        [0, -2, -1, 2, 1, 0],
        [0, 2, -1, -2, 1, 0],
        [0, 4, 0, -5, 0, 1],
    ],
    dtype=np.float64,
)
WINO_G = np.array(
    [
        [1 / 4, 0, 0],
        [-1 / 6, -1 / 6, -1 / 6],
        [-1 / 6, 1 / 6, -1 / 6],
        [1 / 24, 1 / 12, 1 / 6],
        [1 / 24, -1 / 12, 1 / 6],
        [0, 0, 1],
    ],
    dtype=np.float64,
)
WINO_AT = np.array(
    [
        [1, 1, 1, 1, 1, 0],
        [0, 1, -1, 2, -2, 0],
        [0, 1, 1, 4, 4, 0],
        [0, 1, -1, 8, -8, 1],
    ],
    dtype=np.float64,
)


def _mats(dtype):
    return WINO_BT.astype(dtype), WINO_G.astype(dtype), WINO_AT.astype(dtype)


# ---------------------------------------------------------------------------
# im2col / col2im for direct convolution.


def im2col(x: np.ndarray, kh: int, kw: int, sy: int, sx: int) -> np.ndarray:
    """(N,H,W,C) -> (N*OH*OW, kh*kw*C) patch matrix for valid convolution."""
    n, h, w, c = x.shape
    oh = (h - kh) // sy + 1
    ow = (w - kw) // sx + 1
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::sy, ::sx]
    # -> (N, OH, OW, C, kh, kw); reorder so a row is [dy, dx, c]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    return np.ascontiguousarray(cols)


def col2im_add(
    dcols: np.ndarray, n: int, h: int, w: int, c: int, kh: int, kw: int, sy: int, sx: int
) -> np.ndarray:
    """Scatter-add inverse of im2col: accumulate patch gradients into image gradient."""
    oh = (h - kh) // sy + 1
    ow = (w - kw) // sx + 1
    dx = np.zeros((n, h, w, c), dtype=dcols.dtype)
    d6 = dcols.reshape(n, oh, ow, kh, kw, c)
    for dy in range(kh):
        for dxs in range(kw):
            dx[:, dy : dy + sy * oh : sy, dxs : dxs + sx * ow : sx, :] += d6[:, :, :, dy, dxs, :]
    return dx


# ---------------------------------------------------------------------------
# Winograd transforms. T = N * th * tw tiles; V/M layout (36, T, channels).


def _tile_view(x: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Overlapping 6x6 tiles at stride 4: (N,Hp,Wp,C) -> (N,th,tw,6,6,C) view."""
    n, hp, wp, c = x.shape
    sn, sh, sw, sc = x.strides
    return as_strided(x, (n, th, tw, 6, 6, c), (sn, 4 * sh, 4 * sw, sh, sw, sc))


def wino_input(x: np.ndarray, th: int, tw: int) -> np.ndarray:
    """V[k, t, c] = (B^T d B) for every 6x6 input tile d."""
    bt, _, _ = _mats(x.dtype)
    n, _, _, c = x.shape
    tiles = _tile_view(x, th, tw)
    v = np.einsum("ia,ntpabc,jb->ijntpc", bt, tiles, bt, optimize=True)
    return np.ascontiguousarray(v.reshape(36, n * th * tw, c))


def wino_output(m: np.ndarray, n: int, th: int, tw: int) -> np.ndarray:
    """y = A^T M A per tile: (36, T, F) -> (N, 4*th, 4*tw, F)."""
    at, = (_mats(m.dtype)[2],)
    f = m.shape[2]
    m6 = m.reshape(6, 6, n, th, tw, f)
    y = np.einsum("ia,abntpf,jb->ntipjf", at, m6, at, optimize=True)
    return np.ascontiguousarray(y.reshape(n, 4 * th, 4 * tw, f))


def wino_doutput(dy: np.ndarray, th: int, tw: int) -> np.ndarray:
    """dM[k] = A dY A^T per tile: (N, 4*th, 4*tw, F) -> (36, T, F)."""
    at, = (_mats(dy.dtype)[2],)
    n, _, _, f = dy.shape
    dyt = dy.reshape(n, th, 4, tw, 4, f)
    dm = np.einsum("ai,ntapbf,bj->ijntpf", at, dyt, at, optimize=True)
    return np.ascontiguousarray(dm.reshape(36, n * th * tw, f))


def wino_dinput(dv: np.ndarray, n: int, hp: int, wp: int, th: int, tw: int) -> np.ndarray:
    """Overlap-add of B dV B^T tiles back onto the (padded) input gradient."""
    bt, _, _ = _mats(dv.dtype)
    c = dv.shape[2]
    dv6 = dv.reshape(6, 6, n, th, tw, c)
    dtiles = np.einsum("ia,ijntpc,jb->ntpabc", bt, dv6, bt, optimize=True)
    dx = np.zeros((n, hp, wp, c), dtype=dv.dtype)
    for p in range(th):
        for q in range(tw):
            dx[:, 4 * p : 4 * p + 6, 4 * q : 4 * q + 6, :] += dtiles[:, p, q]
    return dx


def wino_kernel_transform(w: np.ndarray) -> np.ndarray:
    """U[k, c, f] = (G g G^T): (3,3,C,F) -> (36, C, F)."""
    _, g, _ = _mats(w.dtype)
    u = np.einsum("ia,abcf,jb->ijcf", g, w, g, optimize=True)
    return np.ascontiguousarray(u.reshape(36, *w.shape[2:]))


def wino_kernel_untransform(du: np.ndarray) -> np.ndarray:
    """dW = G^T dU G: (36, C, F) -> (3,3,C,F)."""
    _, g, _ = _mats(du.dtype)
    du6 = du.reshape(6, 6, *du.shape[1:])
    return np.einsum("ia,ijcf,jb->abcf", g, du6, g, optimize=True)


# ---------------------------------------------------------------------------
# Fused fast path for the conv->relu->maxpool2x2 block in the Winograd domain.


def wino_output_bias_act(m: np.ndarray, bias, n: int, th: int, tw: int, relu: bool) -> np.ndarray:
    """Untransform with optional bias add and relu folded in."""
    y = wino_output(m, n, th, tw)
    if bias is not None:
        y += bias
    if relu:
        np.maximum(y, 0.0, out=y)
    return y


def wino_output_bias_relu_pool(m: np.ndarray, bias: np.ndarray, n: int, th: int, tw: int):
    """Untransform + bias + relu + 2x2/2 max-pool in one logical step.

    Returns (pooled (N, 2*th, 2*tw, F), argmax uint8 offset dy*2+dx within each block).
    """
    y = wino_output(m, n, th, tw)
    y += bias
    np.maximum(y, 0.0, out=y)
    return maxpool2x2(y)


def wino_pool_grad(dpool: np.ndarray, pooled: np.ndarray, idx: np.ndarray, th: int, tw: int):
    """Backward of the fused block: route pooled grads through relu, transform to dM.

    A pooled activation of exactly 0 means the pre-relu max was <= 0, so no gradient
    flows (relu gate); otherwise the gradient lands on the argmax position.
    """
    d = dpool * (pooled > 0)
    dy = maxpool2x2_backward(d, idx)
    return wino_doutput(dy, th, tw)


# ---------------------------------------------------------------------------
# Tile-block variants: same math restricted to tiles [t0, t1), writing into
# caller-provided scratch of shape (36, capacity, channels). A pipelined caller
# alternates transform / GEMM / transform per block so the Winograd-domain
# tensors stay small; semantics are identical to the whole-array kernels.


def _tile_coords(th: int, tw: int, t0: int, t1: int):
    ts = np.arange(t0, t1)
    grid = th * tw
    rem = ts % grid
    return ts // grid, rem // tw, rem % tw


def wino_input_block(
    x: np.ndarray, th: int, tw: int, t0: int, t1: int, v_out: np.ndarray, col0: int = 0
) -> None:
    bt, _, _ = _mats(x.dtype)
    nb = t1 - t0
    n_idx, p_idx, q_idx = _tile_coords(th, tw, t0, t1)
    ar = np.arange(6)
    tiles = x[
        n_idx[:, None, None],
        (4 * p_idx)[:, None, None] + ar[None, :, None],
        (4 * q_idx)[:, None, None] + ar[None, None, :],
        :,
    ]  # (B, 6, 6, C)
    v = np.einsum("ia,tabc,jb->ijtc", bt, tiles, bt, optimize=True)
    v_out[:, col0:col0 + nb] = v.reshape(36, nb, x.shape[3])


def _pool_block_coords(th: int, tw: int, t0: int, t1: int):
    n_idx, p_idx, q_idx = _tile_coords(th, tw, t0, t1)
    du = np.arange(2)
    return (
        n_idx[:, None, None],
        (2 * p_idx)[:, None, None] + du[None, :, None],
        (2 * q_idx)[:, None, None] + du[None, None, :],
    )


def wino_output_pool_block(
    m: np.ndarray, bias: np.ndarray, th: int, tw: int, t0: int, t1: int,
    pooled: np.ndarray, idx: np.ndarray,
) -> None:
    at = _mats(m.dtype)[2]
    nb = t1 - t0
    f = m.shape[2]
    m6 = m[:, :nb].reshape(6, 6, nb, f)
    y = np.einsum("ia,abtf,jb->tijf", at, m6, at, optimize=True)  # (B, 4, 4, F)
    y += bias
    np.maximum(y, 0.0, out=y)
    blocks = y.reshape(nb, 2, 2, 2, 2, f).transpose(0, 1, 3, 2, 4, 5).reshape(nb, 2, 2, 4, f)
    amax = blocks.argmax(axis=3).astype(np.uint8)
    best = np.take_along_axis(blocks, amax[:, :, :, None, :].astype(np.intp), axis=3)[:, :, :, 0, :]
    sel = _pool_block_coords(th, tw, t0, t1)
    pooled[sel] = best
    idx[sel] = amax


def wino_pool_grad_block(
    dpool: np.ndarray, pooled: np.ndarray, idx: np.ndarray, th: int, tw: int,
    t0: int, t1: int, dm_out: np.ndarray,
) -> None:
    at = _mats(dpool.dtype)[2]
    nb = t1 - t0
    f = dpool.shape[3]
    sel = _pool_block_coords(th, tw, t0, t1)
    d = dpool[sel] * (pooled[sel] > 0)
    dblocks = np.zeros((nb, 2, 2, 4, f), dtype=dpool.dtype)
    np.put_along_axis(dblocks, idx[sel][:, :, :, None, :].astype(np.intp), d[:, :, :, None, :], axis=3)
    dy = dblocks.reshape(nb, 2, 2, 2, 2, f).transpose(0, 1, 3, 2, 4, 5).reshape(nb, 4, 4, f)
    dm = np.einsum("ai,tabf,bj->ijtf", at, dy, at, optimize=True)
    dm_out[:, :nb] = dm.reshape(36, nb, f)


def wino_pool_from_y2_block(
    y2: np.ndarray, bias: np.ndarray, th: int, tw: int, t0: int, t1: int,
    pooled: np.ndarray, idx: np.ndarray,
) -> None:
    nb = t1 - t0
    f = pooled.shape[3]
    # row r = 4*a + b of y2 holds output pixel (a, b) of every tile in the block
    y = y2[:, :nb].transpose(1, 0, 2).reshape(nb, 4, 4, f) + bias
    np.maximum(y, 0.0, out=y)
    blocks = y.reshape(nb, 2, 2, 2, 2, f).transpose(0, 1, 3, 2, 4, 5).reshape(nb, 2, 2, 4, f)
    amax = blocks.argmax(axis=3).astype(np.uint8)
    best = np.take_along_axis(blocks, amax[:, :, :, None, :].astype(np.intp), axis=3)[:, :, :, 0, :]
    sel = _pool_block_coords(th, tw, t0, t1)
    pooled[sel] = best
    idx[sel] = amax


def wino_pool_scatter_block(
    d: np.ndarray, idx: np.ndarray, th: int, tw: int, t0: int, t1: int,
    dy2: np.ndarray,
) -> None:
    nb = t1 - t0
    f = d.shape[3]
    sel = _pool_block_coords(th, tw, t0, t1)
    dblocks = np.zeros((nb, 2, 2, 4, f), dtype=d.dtype)
    np.put_along_axis(dblocks, idx[sel][:, :, :, None, :].astype(np.intp), d[sel][:, :, :, None, :], axis=3)
    dy = dblocks.reshape(nb, 2, 2, 2, 2, f).transpose(0, 1, 3, 2, 4, 5).reshape(nb, 4, 4, f)
    dy2[:, :nb] = dy.reshape(nb, 16, f).transpose(1, 0, 2)
    if nb < dy2.shape[1]:
        dy2[:, nb:] = 0.0


def _kron_at(dtype):
    at = WINO_AT.astype(dtype)
    return np.kron(at, at)


def wino_y2_block(m: np.ndarray, y2: np.ndarray, ncol: int) -> None:
    """Row-vectorized output transform: y2[:, :ncol] = kron(A^T, A^T) m[:, :ncol].

    Both arrays are read as 2-D row-major; column j is one (tile, channel) pair.
    """
    at2 = _kron_at(m.dtype)
    m2 = m.reshape(36, -1)
    y2.reshape(16, -1)[:, :ncol] = at2 @ m2[:, :ncol]


def wino_dm_block(dy2: np.ndarray, dm: np.ndarray, col0: int, ncol: int) -> None:
    """Adjoint of wino_y2_block; col0 is a tile offset into dm."""
    a2 = _kron_at(dy2.dtype).T
    d2 = dy2.reshape(16, -1)
    base = col0 * dm.shape[2]
    dm.reshape(36, -1)[:, base:base + ncol] = a2 @ d2[:, :ncol]


def wino_dinput_block(
    dv: np.ndarray, th: int, tw: int, t0: int, t1: int, dxp: np.ndarray, col0: int = 0
) -> None:
    bt, _, _ = _mats(dv.dtype)
    nb = t1 - t0
    c = dv.shape[2]
    dv6 = dv[:, col0:col0 + nb].reshape(6, 6, nb, c)
    dtiles = np.einsum("ia,ijtc,jb->tabc", bt, dv6, bt, optimize=True)
    n_idx, p_idx, q_idx = _tile_coords(th, tw, t0, t1)
    ar = np.arange(6)
    # neighbouring tiles overlap by 2 pixels, so this must be an unbuffered scatter-add
    np.add.at(
        dxp,
        (
            n_idx[:, None, None],
            (4 * p_idx)[:, None, None] + ar[None, :, None],
            (4 * q_idx)[:, None, None] + ar[None, None, :],
        ),
        dtiles,
    )


# ---------------------------------------------------------------------------
# Direct 3x3 valid convolution for small channel counts (stem layer), where
# im2col materialization costs more than the arithmetic saves.


def conv3x3_small_fwd(
    x: np.ndarray, w: np.ndarray, bias: np.ndarray, relu: bool, out: np.ndarray | None = None
) -> np.ndarray:
    win = sliding_window_view(x, (3, 3), axis=(1, 2))  # (N, OH, OW, C, 3, 3)
    y = np.einsum("nopcab,abcf->nopf", win, w, optimize=True)
    y += bias
    if relu:
        np.maximum(y, 0.0, out=y)
    if out is None:
        return np.ascontiguousarray(y)
    out[...] = y
    return out


def conv3x3_small_back_w(x: np.ndarray, dy: np.ndarray, gw: np.ndarray, gb: np.ndarray) -> None:
    win = sliding_window_view(x, (3, 3), axis=(1, 2))
    gw += np.einsum("nopcab,nopf->abcf", win, dy, optimize=True)
    gb += dy.sum(axis=(0, 1, 2))


# ---------------------------------------------------------------------------
# Pooling.


def maxpool2x2(x: np.ndarray):
    """2x2 stride-2 max pooling; argmax offset stored as uint8 dy*2+dx (first max wins)."""
    n, h, w, c = x.shape
    oh, ow = h // 2, w // 2
    blocks = x.reshape(n, oh, 2, ow, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, oh, ow, 4, c)
    idx = blocks.argmax(axis=3).astype(np.uint8)
    out = np.take_along_axis(blocks, idx[:, :, :, None, :].astype(np.intp), axis=3)[:, :, :, 0, :]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(dout: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, oh, ow, c = dout.shape
    dblocks = np.zeros((n, oh, ow, 4, c), dtype=dout.dtype)
    np.put_along_axis(dblocks, idx[:, :, :, None, :].astype(np.intp), dout[:, :, :, None, :], axis=3)
    return (
        dblocks.reshape(n, oh, ow, 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, 2 * oh, 2 * ow, c)
        .copy()
    )


def maxpool(x: np.ndarray, k: int, s: int):
    """General max pooling (valid); returns output and uint8 argmax offset dy*k+dx."""
    n, h, w, c = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]  # (N,OH,OW,C,k,k)
    flat = win.reshape(n, oh, ow, c, k * k)
    idx = flat.argmax(axis=4).astype(np.uint8)
    out = np.take_along_axis(flat, idx[..., None].astype(np.intp), axis=4)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool_backward(dout: np.ndarray, idx: np.ndarray, h: int, w: int, k: int, s: int) -> np.ndarray:
    n, oh, ow, c = dout.shape
    dx = np.zeros((n, h, w, c), dtype=dout.dtype)
    dy_off = (idx // k).astype(np.intp)
    dx_off = (idx % k).astype(np.intp)
    ii = (np.arange(oh) * s)[None, :, None, None] + dy_off
    jj = (np.arange(ow) * s)[None, None, :, None] + dx_off
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, None, None, :]
    np.add.at(dx, (nn, ii, jj, cc), dout)
    return dx


# ---------------------------------------------------------------------------
# Elementwise.


def add_bias_relu(y: np.ndarray, bias: np.ndarray) -> None:
    y += bias
    np.maximum(y, 0.0, out=y)


def add_bias(y: np.ndarray, bias: np.ndarray) -> None:
    y += bias


def relu_gate(d: np.ndarray, act: np.ndarray) -> None:
    """In-place d *= (act > 0), where act is the relu output."""
    d *= act > 0


def adam_step(
    w: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> None:
    """One fused Adam update, in place on w/m/v."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    w -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# Bilinear warp for augmentation.


def rotate_bilinear(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center, bilinear interpolation, zeros outside."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    # inverse map: rotate output coords by -theta to find source coords
    sx = cx + cos_t * xx + sin_t * yy
    sy = cy - sin_t * xx + cos_t * yy
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    def sample(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(inside, vals, 0.0)

    v00 = sample(y0, x0)
    v01 = sample(y0, x0 + 1)
    v10 = sample(y0 + 1, x0)
    v11 = sample(y0 + 1, x0 + 1)
    out = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
    return out.astype(img.dtype)
