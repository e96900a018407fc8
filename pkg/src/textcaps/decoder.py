"""Deconvolutional decoder: masked instantiation vectors back to 28x28 images.

    mask true/predicted class -> flatten (classes*16)
    dense -> 6272 + relu, reshape 7x7x128
    deconv 3x3x128 s1 + relu   (7x7)
    deconv 3x3x64  s2 + relu   (14x14)
    deconv 3x3x32  s2 + relu   (28x28)
    deconv 3x3x1   s1 + sigmoid

The decoder reads the full instantiation tensor with every non-target class
zeroed, so reconstruction gradients sculpt only the target capsule's 16
dimensions per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .capsnet import CLASS_CAPSULE_DIM
from .tensor import ParamStore, glorot_uniform

# (channels, stride, activation) after the dense+reshape stage
DECONV_STACK = ((128, 1, "relu"), (64, 2, "relu"), (32, 2, "relu"), (1, 1, "sigmoid"))


@dataclass(frozen=True)
class DecoderConfig:
    num_classes: int
    grid_size: int = 7
    grid_channels: int = 128
    kernel: int = 3

    @property
    def fc_units(self):
        return self.grid_size * self.grid_size * self.grid_channels

    @property
    def image_size(self):
        n = self.grid_size
        for _ch, s, _a in DECONV_STACK:
            n *= s
        return n


def init_decoder_params(cfg, rng, dtype=np.float64, store=None, prefix="decoder/"):
    params = store if store is not None else ParamStore()
    d_in = cfg.num_classes * CLASS_CAPSULE_DIM
    params.add(f"{prefix}fc/w", glorot_uniform(rng, (d_in, cfg.fc_units), d_in, cfg.fc_units, dtype))
    params.add(f"{prefix}fc/b", np.zeros(cfg.fc_units, dtype=dtype))
    cin = cfg.grid_channels
    k = cfg.kernel
    for i, (ch, _s, _a) in enumerate(DECONV_STACK, start=1):
        # deconv weights are (kh, kw, C_out, C_in)
        params.add(
            f"{prefix}deconv{i}/w",
            glorot_uniform(rng, (k, k, ch, cin), k * k * cin, k * k * ch, dtype),
        )
        params.add(f"{prefix}deconv{i}/b", np.zeros(ch, dtype=dtype))
        cin = ch
    return params


def mask_true_class(C, labels):
    """Zero every class row of C except the labelled one.

    C: (batch, classes, 16); labels: (batch,) ints -> same-shape masked copy.
    """
    jb, m, _ = C.shape
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (jb,):
        raise ValueError(f"labels shape {labels.shape} != ({jb},)")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValueError("label out of range for instantiation tensor")
    masked = np.zeros_like(C)
    rows = np.arange(jb)
    masked[rows, labels] = C[rows, labels]
    return masked


def mask_backward(dmasked, labels, num_classes):
    """Gradient of mask_true_class: pass-through on the labelled row only."""
    out = np.zeros_like(dmasked)
    rows = np.arange(dmasked.shape[0])
    labels = np.asarray(labels, dtype=int)
    out[rows, labels] = dmasked[rows, labels]
    return out


def decode(masked, params, cfg, prefix="decoder/"):
    """Masked instantiation tensor (batch, classes, 16) -> images (batch, H, W, 1).

    Returns (images, cache) for :func:`decode_backward`.
    """
    jb = masked.shape[0]
    flat = masked.reshape(jb, cfg.num_classes * CLASS_CAPSULE_DIM)
    pre_fc = kernels.dense(flat, params[f"{prefix}fc/w"].value, params[f"{prefix}fc/b"].value)
    h = kernels.relu(pre_fc)
    x = h.reshape(jb, cfg.grid_size, cfg.grid_size, cfg.grid_channels)
    cache = {"flat": flat, "pre_fc": pre_fc, "stages": []}
    for i, (_ch, s, act) in enumerate(DECONV_STACK, start=1):
        spec = kernels.ConvSpec(cfg.kernel, cfg.kernel, s, "same")
        pre = kernels.deconv2d(x, params[f"{prefix}deconv{i}/w"].value, params[f"{prefix}deconv{i}/b"].value, spec)
        out = kernels.relu(pre) if act == "relu" else kernels.sigmoid(pre)
        cache["stages"].append((x, spec, pre, out, act))
        x = out
    return x, cache


def decode_backward(dimages, cache, params, cfg, prefix="decoder/"):
    """Accumulate decoder parameter gradients; returns d(masked), (batch, classes, 16)."""
    dx = np.asarray(dimages)
    for i in range(len(DECONV_STACK), 0, -1):
        x, spec, pre, out, act = cache["stages"][i - 1]
        dpre = kernels.relu_backward(dx, pre) if act == "relu" else kernels.sigmoid_backward(dx, out)
        dx, dw, db = kernels.deconv2d_backward(dpre, x, params[f"{prefix}deconv{i}/w"].value, spec)
        params[f"{prefix}deconv{i}/w"].grad += dw
        params[f"{prefix}deconv{i}/b"].grad += db
    jb = dx.shape[0]
    dh = dx.reshape(jb, cfg.fc_units)
    dpre_fc = kernels.relu_backward(dh, cache["pre_fc"])
    dflat, dw, db = kernels.dense_backward(dpre_fc, cache["flat"], params[f"{prefix}fc/w"].value)
    params[f"{prefix}fc/w"].grad += dw
    params[f"{prefix}fc/b"].grad += db
    return dflat.reshape(jb, cfg.num_classes, CLASS_CAPSULE_DIM)
