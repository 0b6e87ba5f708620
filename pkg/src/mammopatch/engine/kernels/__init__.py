"""Kernel backend selection.

The compiled extension (``_ckernels``) and the pure-numpy module (``pykernels``)
implement the same kernel API. The compiled backend is preferred when built; the
numpy backend is the always-available fallback and the reference the compiled
code is tested against. Set ``MAMMOPATCH_KERNELS=python`` or ``=compiled`` to
force a backend (forcing ``compiled`` raises if the extension is missing).

Matrix products themselves are not part of this API: both backends arrange data
so the heavy GEMMs run through numpy's BLAS.
"""

from __future__ import annotations

import os

from . import pykernels
from .pykernels import (
    WINO_AT,
    WINO_BT,
    WINO_G,
    wino_kernel_transform,
    wino_kernel_untransform,
)

_ENV_VAR = "MAMMOPATCH_KERNELS"
_compiled = None
_forced = os.environ.get(_ENV_VAR, "").strip().lower()
if _forced not in ("", "python", "compiled"):
    raise RuntimeError(f"{_ENV_VAR} must be 'python' or 'compiled', got {_forced!r}")
if _forced != "python":
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None
    if _forced == "compiled" and _compiled is None:
        raise ImportError(f"{_ENV_VAR}=compiled but the compiled extension is not built")

BACKEND = "python" if _compiled is None else "compiled"

if _compiled is None:
    im2col = pykernels.im2col
    col2im_add = pykernels.col2im_add
    wino_input = pykernels.wino_input
    wino_output = pykernels.wino_output
    wino_output_bias_act = pykernels.wino_output_bias_act
    wino_output_bias_relu_pool = pykernels.wino_output_bias_relu_pool
    wino_doutput = pykernels.wino_doutput
    wino_pool_grad = pykernels.wino_pool_grad
    wino_dinput = pykernels.wino_dinput
    wino_input_block = pykernels.wino_input_block
    wino_output_pool_block = pykernels.wino_output_pool_block
    wino_pool_grad_block = pykernels.wino_pool_grad_block
    wino_pool_from_y2_block = pykernels.wino_pool_from_y2_block
    wino_pool_scatter_block = pykernels.wino_pool_scatter_block
    wino_y2_block = pykernels.wino_y2_block
    wino_dm_block = pykernels.wino_dm_block
    wino_dinput_block = pykernels.wino_dinput_block
    conv3x3_small_fwd = pykernels.conv3x3_small_fwd
    conv3x3_small_back_w = pykernels.conv3x3_small_back_w
    maxpool2x2 = pykernels.maxpool2x2
    maxpool2x2_backward = pykernels.maxpool2x2_backward
    maxpool = pykernels.maxpool
    maxpool_backward = pykernels.maxpool_backward
    add_bias_relu = pykernels.add_bias_relu
    add_bias = pykernels.add_bias
    relu_gate = pykernels.relu_gate
    adam_step = pykernels.adam_step
    rotate_bilinear = pykernels.rotate_bilinear
else:
    im2col = _compiled.im2col
    col2im_add = _compiled.col2im_add
    wino_input = _compiled.wino_input
    wino_output_bias_act = _compiled.wino_output_bias_act
    wino_output_bias_relu_pool = _compiled.wino_output_bias_relu_pool
    wino_doutput = _compiled.wino_doutput
    wino_pool_grad = _compiled.wino_pool_grad
    wino_dinput = _compiled.wino_dinput
    wino_input_block = _compiled.wino_input_block
    wino_output_pool_block = _compiled.wino_output_pool_block
    wino_pool_grad_block = _compiled.wino_pool_grad_block
    wino_pool_from_y2_block = _compiled.wino_pool_from_y2_block
    wino_pool_scatter_block = _compiled.wino_pool_scatter_block
    wino_y2_block = _compiled.wino_y2_block
    wino_dm_block = _compiled.wino_dm_block
    wino_dinput_block = _compiled.wino_dinput_block
    conv3x3_small_fwd = _compiled.conv3x3_small_fwd
    conv3x3_small_back_w = _compiled.conv3x3_small_back_w
    maxpool2x2 = _compiled.maxpool2x2
    maxpool2x2_backward = _compiled.maxpool2x2_backward
    maxpool = _compiled.maxpool
    maxpool_backward = _compiled.maxpool_backward
    rotate_bilinear = _compiled.rotate_bilinear

    def wino_output(m, n, th, tw):
        return _compiled.wino_output_bias_act(m, None, n, th, tw, False)

    # the compiled elementwise kernels want flat / (rows, C) contiguous views
    def add_bias_relu(y, bias):
        _compiled.add_bias_relu(y.reshape(-1, y.shape[-1]), bias)

    def add_bias(y, bias):
        _compiled.add_bias(y.reshape(-1, y.shape[-1]), bias)

    def relu_gate(d, act):
        _compiled.relu_gate(d.reshape(-1), act.reshape(-1))

    def adam_step(w, grad, m, v, t, lr, beta1, beta2, eps):
        _compiled.adam_step(
            w.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
            t, lr, beta1, beta2, eps,
        )


__all__ = [
    "BACKEND",
    "WINO_AT",
    "WINO_BT",
    "WINO_G",
    "add_bias",
    "add_bias_relu",
    "adam_step",
    "col2im_add",
    "conv3x3_small_back_w",
    "conv3x3_small_fwd",
    "im2col",
    "maxpool",
    "maxpool2x2",
    "maxpool2x2_backward",
    "maxpool_backward",
    "pykernels",
    "relu_gate",
    "rotate_bilinear",
    "wino_dinput",
    "wino_dinput_block",
    "wino_dm_block",
    "wino_doutput",
    "wino_input",
    "wino_input_block",
    "wino_kernel_transform",
    "wino_kernel_untransform",
    "wino_output",
    "wino_output_bias_act",
    "wino_output_bias_relu_pool",
    "wino_output_pool_block",
    "wino_pool_grad",
    "wino_pool_from_y2_block",
    "wino_pool_grad_block",
    "wino_pool_scatter_block",
    "wino_y2_block",
]
