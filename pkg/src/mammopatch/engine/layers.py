"""Engine layers: channels-last float32 forward/backward building blocks.

Conventions shared by every layer:

- Tensors are float32, shape (N, H, W, C) for images and (N, D) for vectors,
  C-contiguous at layer boundaries.
- ``forward(x, train=True)`` stashes whatever backward needs; ``train=False``
  stashes nothing and is side-effect free.
- ``backward(dout)`` may mutate ``dout`` in place and returns the input
  gradient. Parameter gradients accumulate into the layer's ``g*`` arrays, so
  chunked minibatch processing sums correctly; call ``zero_grads`` per step.
- A layer flagged ``needs_input_grad = False`` (the network marks its first
  layer) may skip computing the input gradient and return None.

3x3 stride-1 convolutions run through the Winograd F(4x4,3x3) kernels when the
input has enough channels to make the transform pay for itself; everything else
uses im2col + GEMM. Both routes share the BLAS-backed matmul for the heavy
lifting and the kernel backend (compiled or numpy) for the rest.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels

# below this many input channels the Winograd transform traffic costs more
# than the GEMM work it saves, so the direct route wins
_WINO_MIN_CHANNELS = 8

# tiles per block in the fused conv-relu-pool pipeline: scratch for one block
# (V and M slabs) stays cache resident while the per-block GEMM batch is still
# large enough for BLAS to run near peak; 126 keeps the 36 scratch row strides
# off power-of-two byte offsets that would collide in one L1 set
_WINO_BLOCK = 126

# blocks per backward super-block: the weight- and input-gradient GEMMs batch
# this many blocks per BLAS call; 1 measured fastest once the transform kernels
# stopped dominating (wider batches push the dM scratch out of L2)
_WINO_SUPER = 1



class Layer:
    """Base layer; see module docstring for the forward/backward contract.

    A train-mode forward stashes whatever its backward needs on ``self._ctx``;
    the network swaps that attribute to interleave several forward passes
    before their backwards.
    """

    name = "layer"
    needs_input_grad = True
    _ctx = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray):
        raise NotImplementedError

    def params(self):
        """List of (name, value, grad) triples; value and grad are same-shape arrays."""
        return []

    def buffers(self):
        """Non-trained state that still belongs in a checkpoint (e.g. running stats)."""
        return []

    def children(self):
        return []

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def zero_grads(self) -> None:
        for _, _, g in self.params():
            g[...] = 0.0

    def flush_deferred(self) -> None:
        pass


# -- scratch arena --------------------------------------------------------------
#
# Training reallocates the same large activation and scratch tensors every
# chunk; fresh mmap-backed allocations pay a page fault per 4 KiB touched, which
# at hundreds of MB per step dwarfs some of the arithmetic they hold. Train-mode
# code paths instead recycle buffers through a small free list keyed by byte
# size: `take_buffer` pops a matching buffer (reshaped to order) or allocates
# one, `give_buffer` returns it once its last reader is done. Ownership is
# positional, not tracked: a buffer must be given back exactly once, only after
# it can no longer be reached by live code. Inference paths allocate normally so
# they can never drain buffers a training step expects to reuse.

_ARENA: dict = {}
_ARENA_SLOTS = 8


def take_buffer(shape, dtype=np.float32, zero: bool = False) -> np.ndarray:
    size = int(np.prod(shape, dtype=np.int64))
    pool = _ARENA.get((size, np.dtype(dtype)))
    buf = pool.pop().reshape(shape) if pool else np.empty(shape, dtype)
    if zero:
        buf.fill(0)
    return buf


def give_buffer(buf) -> None:
    if buf is None:
        return
    pool = _ARENA.setdefault((buf.size, buf.dtype), [])
    if len(pool) < _ARENA_SLOTS:
        pool.append(buf)


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2D(Layer):
    """2-D convolution, optional fused relu, optional fused 2x2/2 max pool.

    ``padding`` is "valid" or "same" (stride 1 only for "same").
    ``fuse_pool`` applies relu then 2x2 stride-2 max pooling inside the Winograd
    output transform; it requires a 3x3 stride-1 kernel, relu activation, and
    conv output dims divisible by 4 (the builder checks shapes before fusing).
    """

    def __init__(self, in_channels: int, filters: int, kernel=(3, 3), stride=(1, 1),
                 padding: str = "valid", activation: str | None = None,
                 fuse_pool: bool = False, use_bias: bool = True, name: str = "conv2d"):
        if padding not in ("valid", "same"):
            raise ValueError(f"unsupported padding {padding!r}")
        if activation not in (None, "relu"):
            raise ValueError(f"unsupported conv activation {activation!r}")
        kh, kw = kernel
        if padding == "same" and (kh % 2 == 0 or kw % 2 == 0 or stride != (1, 1)):
            raise ValueError("'same' padding requires odd kernel and unit stride")
        if fuse_pool and not (kernel == (3, 3) and stride == (1, 1) and activation == "relu"
                              and use_bias):
            raise ValueError("fuse_pool requires a biased 3x3 stride-1 relu convolution")
        self.name = name
        self.in_channels = in_channels
        self.filters = filters
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.activation = activation
        self.fuse_pool = fuse_pool
        self.use_bias = use_bias
        self.winograd = kernel == (3, 3) and stride == (1, 1) and (
            fuse_pool or in_channels >= _WINO_MIN_CHANNELS
        )
        self.w = np.zeros((kh, kw, in_channels, filters), dtype=np.float32)
        self.gw = np.zeros_like(self.w)
        self.b = np.zeros(filters, dtype=np.float32) if use_bias else None
        self.gb = np.zeros_like(self.b) if use_bias else None
        self._ctx = None

    def params(self):
        out = [("w", self.w, self.gw)]
        if self.use_bias:
            out.append(("b", self.b, self.gb))
        return out

    def init_params(self, rng):
        kh, kw = self.kernel
        self.w[...] = _uniform_fan_in(rng, self.w.shape, kh * kw * self.in_channels)
        if self.use_bias:
            self.b[...] = 0.0

    def out_hw(self, h: int, w: int):
        kh, kw = self.kernel
        sy, sx = self.stride
        if self.padding == "same":
            oh, ow = h, w
        else:
            oh = (h - kh) // sy + 1
            ow = (w - kw) // sx + 1
        if self.fuse_pool:
            oh, ow = oh // 2, ow // 2
        return oh, ow

    # -- Winograd route ------------------------------------------------------

    def _forward_wino(self, x, train):
        n, h, w, _ = x.shape
        same = self.padding == "same"
        oh = h if same else h - 2
        ow = w if same else w - 2
        th, tw = -(-oh // 4), -(-ow // 4)
        hp, wp = 4 * th + 2, 4 * tw + 2
        pt = pl = 1 if same else 0
        pb, pr = hp - h - pt, wp - w - pl
        if pt or pl or pb or pr:
            xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        else:
            xp = x
        u = kernels.wino_kernel_transform(self.w)
        geom = (n, h, w, oh, ow, th, tw, hp, wp, pt, pl)
        if self.fuse_pool:
            if oh % 4 or ow % 4:
                raise ValueError("fuse_pool needs conv output dims divisible by 4")
            pooled, idx, vfull = self._run_pool_blocks(xp, u, geom, train)
            if train:
                # the input transform is kept from the forward pass; backward
                # streams it straight into the weight- and input-gradient
                # GEMMs instead of recomputing it per block
                self._ctx = ("winopool", geom, vfull, u, pooled, idx)
            return pooled
        v = kernels.wino_input(xp, th, tw)
        m = np.matmul(v, u)
        y = kernels.wino_output_bias_act(m, self.b, n, th, tw, self.activation == "relu")
        if oh != 4 * th or ow != 4 * tw:
            y = np.ascontiguousarray(y[:, :oh, :ow])
        if train:
            self._ctx = ("wino", geom, v, u, y if self.activation == "relu" else None)
        return y

    def _run_pool_blocks(self, xp, u, geom, train):
        n, th, tw = geom[0], geom[5], geom[6]
        c, f = self.in_channels, self.filters
        t_total = n * th * tw
        cap = min(_WINO_BLOCK, t_total)
        if train:
            vfull = take_buffer((36, t_total, c))
            vb = None
            mb = take_buffer((36, cap, f))
            y2 = take_buffer((16, cap, f))
            pooled = take_buffer((n, 2 * th, 2 * tw, f))
            idx = take_buffer((n, 2 * th, 2 * tw, f), np.uint8)
        else:
            vfull = None
            vb = np.empty((36, cap, c), dtype=np.float32)
            mb = np.empty((36, cap, f), dtype=np.float32)
            y2 = np.empty((16, cap, f), dtype=np.float32)
            pooled = np.empty((n, 2 * th, 2 * tw, f), dtype=np.float32)
            idx = np.empty((n, 2 * th, 2 * tw, f), dtype=np.uint8)
        for t0 in range(0, t_total, cap):
            t1 = min(t0 + cap, t_total)
            if train:
                kernels.wino_input_block(xp, th, tw, t0, t1, vfull, t0)
                vs = vfull[:, t0:t1]
            else:
                kernels.wino_input_block(xp, th, tw, t0, t1, vb)
                vs = vb[:, : t1 - t0]
            np.matmul(vs, u, out=mb[:, : t1 - t0])
            kernels.wino_y2_block(mb, y2, (t1 - t0) * f)
            kernels.wino_pool_from_y2_block(y2, self.b, th, tw, t0, t1, pooled, idx)
        if train:
            give_buffer(mb)
            give_buffer(y2)
        return pooled, idx, vfull

    def _backward_wino_pooled(self, dpool):
        _, geom, vfull, u, pooled, idx = self._ctx
        n, h, w, oh, ow, th, tw, hp, wp, pt, pl = geom
        c, f = self.in_channels, self.filters
        # gate once in place (dout is ours to consume); gb and the scatter then
        # both read the already-masked gradient
        kernels.relu_gate(dpool, pooled)
        self.gb += dpool.sum(axis=(0, 1, 2))
        t_total = n * th * tw
        cap = min(_WINO_BLOCK, t_total)
        sb = min(cap * _WINO_SUPER, t_total)
        dy2 = take_buffer((16, cap, f))
        mb = take_buffer((36, sb, f))
        du = take_buffer((36, c, f), zero=True)
        dub = take_buffer((36, c, f))
        need_dx = self.needs_input_grad
        if need_dx:
            dvb = take_buffer((36, sb, c))
            ut = np.ascontiguousarray(u.transpose(0, 2, 1))
            dxp = take_buffer((n, hp, wp, c), zero=True)
        # dM stays in a cache-sized scratch spanning a few blocks: wide enough
        # that the two batched gradient GEMMs amortize their per-call cost,
        # small enough that it never round-trips through DRAM
        for s0 in range(0, t_total, sb):
            s1 = min(s0 + sb, t_total)
            for t0 in range(s0, s1, cap):
                t1 = min(t0 + cap, t_total)
                kernels.wino_pool_scatter_block(dpool, idx, th, tw, t0, t1, dy2)
                kernels.wino_dm_block(dy2, mb, t0 - s0, (t1 - t0) * f)
            ns = s1 - s0
            np.matmul(vfull[:, s0:s1].transpose(0, 2, 1), mb[:, :ns], out=dub)
            du += dub
            if need_dx:
                np.matmul(mb[:, :ns], ut, out=dvb[:, :ns])
                for t0 in range(s0, s1, cap):
                    t1 = min(t0 + cap, t_total)
                    kernels.wino_dinput_block(dvb, th, tw, t0, t1, dxp, t0 - s0)
        self.gw += kernels.wino_kernel_untransform(du)
        give_buffer(dy2)
        give_buffer(mb)
        give_buffer(du)
        give_buffer(dub)
        give_buffer(vfull)
        give_buffer(pooled)
        give_buffer(idx)
        if not need_dx:
            return None
        give_buffer(dvb)
        if pt or pl or hp > h + pt or wp > w + pl:
            dx = np.ascontiguousarray(dxp[:, pt:pt + h, pl:pl + w])
            give_buffer(dxp)
            return dx
        return dxp

    def _backward_wino(self, dout):
        _, geom, v, u, act = self._ctx
        n, h, w, oh, ow, th, tw, hp, wp, pt, pl = geom
        if act is not None:
            kernels.relu_gate(dout, act)
        if self.use_bias:
            self.gb += dout.sum(axis=(0, 1, 2))
        if oh != 4 * th or ow != 4 * tw:
            dy = np.zeros((n, 4 * th, 4 * tw, self.filters), dtype=np.float32)
            dy[:, :oh, :ow] = dout
        else:
            dy = dout
        dm = kernels.wino_doutput(dy, th, tw)
        du = np.matmul(v.transpose(0, 2, 1), dm)
        self.gw += kernels.wino_kernel_untransform(du)
        if not self.needs_input_grad:
            return None
        dv = np.matmul(dm, u.transpose(0, 2, 1))
        dxp = kernels.wino_dinput(dv, n, hp, wp, th, tw)
        if pt or pl or hp > h + pt or wp > w + pl:
            return np.ascontiguousarray(dxp[:, pt:pt + h, pl:pl + w])
        return dxp

    # -- direct (im2col) route -------------------------------------------------

    def _forward_direct(self, x, train):
        n, h, w, c = x.shape
        kh, kw = self.kernel
        sy, sx = self.stride
        if self.padding == "same":
            ph, pw = kh // 2, kw // 2
            xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        else:
            ph = pw = 0
            xp = x
        hp, wp = h + 2 * ph, w + 2 * pw
        oh = (hp - kh) // sy + 1
        ow = (wp - kw) // sx + 1
        # few-channel 3x3 stem: direct kernel beats materializing im2col columns;
        # only when no input gradient is needed, since it does not keep columns
        if kh == kw == 3 and sy == sx == 1 and (not train or not self.needs_input_grad):
            bias = self.b if self.use_bias else np.zeros(self.filters, dtype=np.float32)
            buf = take_buffer((n, hp - 2, wp - 2, self.filters)) if train else None
            y = kernels.conv3x3_small_fwd(xp, self.w, bias, self.activation == "relu", buf)
            if train:
                self._ctx = ("small3", xp, y, self.activation == "relu")
            return y
        if kh == kw == 1 and sy == sx == 1:
            cols = xp.reshape(n * oh * ow, c)
        else:
            cols = kernels.im2col(xp, kh, kw, sy, sx)
        y = np.matmul(cols, self.w.reshape(kh * kw * c, self.filters))
        if self.use_bias:
            if self.activation == "relu":
                kernels.add_bias_relu(y, self.b)
            else:
                kernels.add_bias(y, self.b)
        elif self.activation == "relu":
            np.maximum(y, 0.0, out=y)
        y = y.reshape(n, oh, ow, self.filters)
        if train:
            self._ctx = ("direct", (n, h, w, c, hp, wp, ph, pw), cols,
                         y if self.activation == "relu" else None)
        return y

    def _backward_small3(self, dout):
        _, xp, y, relu = self._ctx
        if relu:
            kernels.relu_gate(dout, y)
        gb = self.gb if self.use_bias else np.zeros(self.filters, dtype=np.float32)
        kernels.conv3x3_small_back_w(xp, dout, self.gw, gb)
        give_buffer(y)
        return None  # taken only when needs_input_grad is False

    def _backward_direct(self, dout):
        _, geom, cols, act = self._ctx
        n, h, w, c, hp, wp, ph, pw = geom
        kh, kw = self.kernel
        sy, sx = self.stride
        if act is not None:
            kernels.relu_gate(dout, act)
        if self.use_bias:
            self.gb += dout.sum(axis=(0, 1, 2))
        dy2 = dout.reshape(-1, self.filters)
        self.gw += np.matmul(cols.T, dy2).reshape(self.w.shape)
        if not self.needs_input_grad:
            return None
        dcols = np.matmul(dy2, self.w.reshape(kh * kw * c, self.filters).T)
        if kh == kw == 1 and sy == sx == 1:
            dxp = dcols.reshape(n, hp, wp, c)
        else:
            dxp = kernels.col2im_add(dcols, n, hp, wp, c, kh, kw, sy, sx)
        if ph or pw:
            return np.ascontiguousarray(dxp[:, ph:ph + h, pw:pw + w])
        return dxp

    def forward(self, x, train=True):
        self._ctx = None
        if self.winograd:
            return self._forward_wino(x, train)
        return self._forward_direct(x, train)

    def backward(self, dout):
        if self._ctx is None:
            raise RuntimeError(f"{self.name}: backward before training forward")
        try:
            kind = self._ctx[0]
            if kind == "winopool":
                return self._backward_wino_pooled(dout)
            if kind == "wino":
                return self._backward_wino(dout)
            if kind == "small3":
                return self._backward_small3(dout)
            return self._backward_direct(dout)
        finally:
            self._ctx = None


class DepthwiseConv2D(Layer):
    """Per-channel 3x3 convolution (the depthwise half of a separable conv)."""

    def __init__(self, channels: int, kernel=(3, 3), stride=(1, 1), padding: str = "same",
                 activation: str | None = None, use_bias: bool = True, name: str = "dwconv2d"):
        if padding not in ("valid", "same"):
            raise ValueError(f"unsupported padding {padding!r}")
        if activation not in (None, "relu"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.name = name
        self.channels = channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.activation = activation
        self.use_bias = use_bias
        kh, kw = kernel
        self.w = np.zeros((kh, kw, channels), dtype=np.float32)
        self.gw = np.zeros_like(self.w)
        self.b = np.zeros(channels, dtype=np.float32) if use_bias else None
        self.gb = np.zeros_like(self.b) if use_bias else None
        self._ctx = None

    def params(self):
        out = [("w", self.w, self.gw)]
        if self.use_bias:
            out.append(("b", self.b, self.gb))
        return out

    def init_params(self, rng):
        kh, kw = self.kernel
        self.w[...] = _uniform_fan_in(rng, self.w.shape, kh * kw)
        if self.use_bias:
            self.b[...] = 0.0

    def out_hw(self, h, w):
        kh, kw = self.kernel
        sy, sx = self.stride
        if self.padding == "same":
            return -(-h // sy), -(-w // sx)
        return (h - kh) // sy + 1, (w - kw) // sx + 1

    def forward(self, x, train=True):
        self._ctx = None
        n, h, w, c = x.shape
        kh, kw = self.kernel
        sy, sx = self.stride
        if self.padding == "same":
            oh, ow = -(-h // sy), -(-w // sx)
            pad_h = max((oh - 1) * sy + kh - h, 0)
            pad_w = max((ow - 1) * sx + kw - w, 0)
            pt, pl = pad_h // 2, pad_w // 2
            xp = np.pad(x, ((0, 0), (pt, pad_h - pt), (pl, pad_w - pl), (0, 0)))
        else:
            pt = pl = 0
            oh, ow = (h - kh) // sy + 1, (w - kw) // sx + 1
            xp = x
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sy, ::sx]
        y = np.einsum("nopcab,abc->nopc", win, self.w, optimize=True).astype(np.float32)
        if self.use_bias:
            y += self.b
        if self.activation == "relu":
            np.maximum(y, 0.0, out=y)
        if train:
            self._ctx = (xp, (n, h, w, oh, ow, pt, pl), y if self.activation == "relu" else None)
        return y

    def backward(self, dout):
        xp, geom, act = self._ctx
        self._ctx = None
        n, h, w, oh, ow, pt, pl = geom
        kh, kw = self.kernel
        sy, sx = self.stride
        if act is not None:
            dout = dout * (act > 0)
        if self.use_bias:
            self.gb += dout.sum(axis=(0, 1, 2))
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sy, ::sx]
        self.gw += np.einsum("nopcab,nopc->abc", win, dout, optimize=True).astype(np.float32)
        if not self.needs_input_grad:
            return None
        dxp = np.zeros_like(xp)
        for a in range(kh):
            for bcol in range(kw):
                dxp[:, a:a + sy * oh:sy, bcol:bcol + sx * ow:sx, :] += dout * self.w[a, bcol]
        return np.ascontiguousarray(dxp[:, pt:pt + h, pl:pl + w])


class MaxPool2D(Layer):
    """Max pooling with square window ``pool`` and stride ``stride`` (valid)."""

    def __init__(self, pool: int = 2, stride: int | None = None, name: str = "maxpool2d"):
        self.name = name
        self.pool = pool
        self.stride = pool if stride is None else stride
        self._ctx = None

    def out_hw(self, h, w):
        return (h - self.pool) // self.stride + 1, (w - self.pool) // self.stride + 1

    def forward(self, x, train=True):
        self._ctx = None
        n, h, w, c = x.shape
        fast = self.pool == 2 and self.stride == 2 and h % 2 == 0 and w % 2 == 0
        if fast:
            y, idx = kernels.maxpool2x2(x)
        else:
            y, idx = kernels.maxpool(x, self.pool, self.stride)
        if train:
            self._ctx = (h, w, idx, fast)
        return y

    def backward(self, dout):
        h, w, idx, fast = self._ctx
        self._ctx = None
        if fast:
            return kernels.maxpool2x2_backward(dout, idx)
        return kernels.maxpool_backward(dout, idx, h, w, self.pool, self.stride)


class GlobalAvgPool2D(Layer):
    """Mean over the spatial grid: (N, H, W, C) -> (N, C)."""

    def __init__(self, name: str = "gap2d"):
        self.name = name
        self._ctx = None

    def forward(self, x, train=True):
        n, h, w, c = x.shape
        if train:
            self._ctx = (h, w)
        return x.mean(axis=(1, 2), dtype=np.float32)

    def backward(self, dout):
        h, w = self._ctx
        n, c = dout.shape
        dx = np.empty((n, h, w, c), dtype=np.float32)
        dx[...] = dout[:, None, None, :] / (h * w)
        return dx


class Flatten(Layer):
    """(N, H, W, C) -> (N, H*W*C), row-major over (H, W, C)."""

    def __init__(self, name: str = "flatten"):
        self.name = name
        self._ctx = None

    def forward(self, x, train=True):
        if train:
            self._ctx = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._ctx)


class Activation(Layer):
    """Standalone relu (used after bias-free conv + batchnorm stacks)."""

    def __init__(self, name: str = "relu"):
        self.name = name
        self._ctx = None

    def forward(self, x, train=True):
        y = np.maximum(x, 0.0)
        if train:
            self._ctx = y
        return y

    def backward(self, dout):
        kernels.relu_gate(dout, self._ctx)
        self._ctx = None
        return dout


class BatchNorm2D(Layer):
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes with statistics of the chunk being processed and
    updates running statistics; eval mode uses the running statistics.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5,
                 name: str = "batchnorm2d"):
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(channels, dtype=np.float32)
        self.beta = np.zeros(channels, dtype=np.float32)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self._ctx = None

    def params(self):
        return [("gamma", self.gamma, self.ggamma), ("beta", self.beta, self.gbeta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def init_params(self, rng):
        self.gamma[...] = 1.0
        self.beta[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def forward(self, x, train=True):
        if train:
            mu = x.mean(axis=(0, 1, 2), dtype=np.float32)
            var = x.var(axis=(0, 1, 2), dtype=np.float32)
            self.running_mean[...] = self.momentum * self.running_mean + (1 - self.momentum) * mu
            self.running_var[...] = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mu, var = self.running_mean, self.running_var
        ivar = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * ivar
        y = (self.gamma * xhat + self.beta).astype(np.float32, copy=False)
        if train:
            self._ctx = (xhat, ivar)
        return y

    def backward(self, dout):
        xhat, ivar = self._ctx
        self._ctx = None
        m = dout.shape[0] * dout.shape[1] * dout.shape[2]
        self.ggamma += (dout * xhat).sum(axis=(0, 1, 2))
        self.gbeta += dout.sum(axis=(0, 1, 2))
        # standard batchnorm input gradient with biased batch variance
        dxhat = dout * self.gamma
        dx = ivar * (dxhat - dxhat.mean(axis=(0, 1, 2)) - xhat * (dxhat * xhat).mean(axis=(0, 1, 2)))
        return dx.astype(np.float32, copy=False)


class Dense(Layer):
    """Fully connected layer, optional fused relu.

    ``defer_wgrad=True`` batches the weight-gradient GEMM: backward stashes the
    (input, output-grad) pair per chunk and ``flush_deferred`` computes the
    whole-step weight gradient in one BLAS call. Used for the huge
    flatten->dense layer where per-chunk skinny GEMMs waste most of the time.
    Deferred mode writes (not accumulates) the weight grad at flush.
    """

    def __init__(self, in_features: int, units: int, activation: str | None = None,
                 defer_wgrad: bool = False, name: str = "dense"):
        if activation not in (None, "relu"):
            raise ValueError(f"unsupported dense activation {activation!r}")
        self.name = name
        self.in_features = in_features
        self.units = units
        self.activation = activation
        self.defer_wgrad = defer_wgrad
        self.w = np.zeros((in_features, units), dtype=np.float32)
        self.gw = np.zeros_like(self.w)
        self.b = np.zeros(units, dtype=np.float32)
        self.gb = np.zeros_like(self.b)
        self._ctx = None
        self._deferred = []

    def params(self):
        return [("w", self.w, self.gw), ("b", self.b, self.gb)]

    def init_params(self, rng):
        self.w[...] = _uniform_fan_in(rng, self.w.shape, self.in_features)
        self.b[...] = 0.0

    def forward(self, x, train=True):
        self._ctx = None
        y = np.matmul(x, self.w)
        if self.activation == "relu":
            kernels.add_bias_relu(y, self.b)
        else:
            kernels.add_bias(y, self.b)
        if train:
            self._ctx = (x, y if self.activation == "relu" else None)
        return y

    def backward(self, dout):
        x, act = self._ctx
        self._ctx = None
        if act is not None:
            kernels.relu_gate(dout, act)
        self.gb += dout.sum(axis=0)
        if self.defer_wgrad:
            self._deferred.append((x, dout))
        else:
            self.gw += np.matmul(x.T, dout)
        if not self.needs_input_grad:
            return None
        dx = take_buffer((dout.shape[0], self.in_features))
        np.matmul(dout, self.w.T, out=dx)
        return dx

    def zero_grads(self):
        super().zero_grads()
        self._deferred = []

    def flush_deferred(self):
        if not self._deferred:
            return
        if len(self._deferred) == 1:
            x, d = self._deferred[0]
        else:
            x = np.concatenate([p[0] for p in self._deferred], axis=0)
            d = np.concatenate([p[1] for p in self._deferred], axis=0)
        np.matmul(x.T, d, out=self.gw)
        for xp, _ in self._deferred:
            give_buffer(xp)
        self._deferred = []


def _run_forward(layers, x, train):
    for layer in layers:
        x = layer.forward(x, train)
    return x


def _run_backward(layers, d):
    for layer in reversed(layers):
        d = layer.backward(d)
    return d


class ResidualBlock(Layer):
    """Two-branch residual unit: relu(main(x) + shortcut(x)).

    ``shortcut=None`` means the identity skip; otherwise it is the projection
    path (1x1 conv + batchnorm) used when shapes change.
    """

    def __init__(self, main, shortcut=None, name: str = "resblock"):
        self.name = name
        self.main = list(main)
        self.shortcut = list(shortcut) if shortcut else None
        self._ctx = None

    def children(self):
        return self.main + (self.shortcut or [])

    def forward(self, x, train=True):
        a = _run_forward(self.main, x, train)
        s = _run_forward(self.shortcut, x, train) if self.shortcut else x
        a += s
        np.maximum(a, 0.0, out=a)
        if train:
            self._ctx = a
        return a

    def backward(self, dout):
        kernels.relu_gate(dout, self._ctx)
        self._ctx = None
        dmain = _run_backward(self.main, dout.copy())
        dskip = _run_backward(self.shortcut, dout) if self.shortcut else dout
        dmain += dskip
        return dmain
