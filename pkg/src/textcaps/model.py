"""The full model: capsule classifier plus one or two reconstruction decoders.

A :class:`TextCapsModel` owns a single :class:`~textcaps.tensor.ParamStore`
with namespaced parameters (``classifier/...``, ``decoder0/...``,
``decoder1/...``).  Each decoder is trained against its own reconstruction
loss; two-decoder models exist so their outputs can be fused pixel-wise with
:func:`textcaps.losses.combine_two`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import capsnet, decoder as decoder_mod, losses
from .capsnet import ClassifierConfig
from .data_io import Checkpoint
from .decoder import DecoderConfig
from .tensor import ParamStore, make_rng, resolve_dtype


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    image_size: int = 28
    decoder_losses: tuple = ("bce",)
    conv_channels: tuple = (64, 128, 256)
    conv_kernels: tuple = (3, 3, 3)
    conv_strides: tuple = (1, 1, 2)
    primary_channels: int = 32
    primary_kernel: int = 9
    primary_stride: int = 2
    routing_iterations: int = 3

    def __post_init__(self):
        if not (1 <= len(self.decoder_losses) <= 2):
            raise ValueError("models carry one or two decoders")
        for kind in self.decoder_losses:
            if kind not in losses.LOSSES:
                raise ValueError(f"unknown decoder loss {kind!r}")

    def classifier_config(self):
        return ClassifierConfig(
            num_classes=self.num_classes,
            image_size=self.image_size,
            conv_channels=tuple(self.conv_channels),
            conv_kernels=tuple(self.conv_kernels),
            conv_strides=tuple(self.conv_strides),
            primary_channels=self.primary_channels,
            primary_kernel=self.primary_kernel,
            primary_stride=self.primary_stride,
            routing_iterations=self.routing_iterations,
        )

    def decoder_config(self):
        ccfg = self.classifier_config()
        return DecoderConfig(num_classes=self.num_classes, grid_size=ccfg.grid_size)

    def to_dict(self):
        d = asdict(self)
        for key in ("decoder_losses", "conv_channels", "conv_kernels", "conv_strides"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("decoder_losses", "conv_channels", "conv_kernels", "conv_strides"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class TextCapsModel:
    def __init__(self, cfg, seed=0, dtype="double"):
        self.cfg = cfg
        self.dtype = resolve_dtype(dtype)
        self.classifier_cfg = cfg.classifier_config()
        self.decoder_cfg = cfg.decoder_config()
        self.params = ParamStore()
        rng = make_rng(seed)
        capsnet.init_classifier_params(
            self.classifier_cfg, rng, self.dtype, store=self.params, prefix="classifier/"
        )
        for d in range(len(cfg.decoder_losses)):
            decoder_mod.init_decoder_params(
                self.decoder_cfg, rng, self.dtype, store=self.params, prefix=f"decoder{d}/"
            )

    # -- forward pieces -------------------------------------------------
    def instantiation(self, images):
        """images (batch, H, W, 1) -> (C, cache)."""
        return capsnet.classifier_forward(
            images.astype(self.dtype, copy=False), self.params, self.classifier_cfg, "classifier/"
        )

    def instantiation_backward(self, dC, cache):
        return capsnet.classifier_backward(dC, cache, self.params, self.classifier_cfg, "classifier/")

    def decode(self, masked, index=0):
        """Masked instantiation tensor -> (images, cache) from decoder *index*."""
        return decoder_mod.decode(masked, self.params, self.decoder_cfg, f"decoder{index}/")

    def decode_backward(self, dimages, cache, index=0):
        return decoder_mod.decode_backward(dimages, cache, self.params, self.decoder_cfg, f"decoder{index}/")

    def reconstruct(self, images, labels=None, index=0):
        """Classify-mask-decode in one step; uses predicted labels when none given."""
        C, _ = self.instantiation(images)
        if labels is None:
            labels = capsnet.classify(C)
        masked = decoder_mod.mask_true_class(C, labels)
        recon, _ = self.decode(masked, index)
        return recon, np.asarray(labels)

    def predict(self, images):
        C, _ = self.instantiation(images)
        return capsnet.classify(C)

    @property
    def num_decoders(self):
        return len(self.cfg.decoder_losses)

    def decoder_param_names(self):
        return [n for n in self.params.names() if n.startswith("decoder")]

    def classifier_param_names(self):
        return [n for n in self.params.names() if n.startswith("classifier/")]

    # -- persistence ----------------------------------------------------
    def to_checkpoint(self, metadata=None):
        return Checkpoint(
            config=self.cfg.to_dict(), params=self.params.state_dict(), metadata=metadata or {}
        )

    @classmethod
    def from_checkpoint(cls, ckpt, dtype="double"):
        cfg = ModelConfig.from_dict(ckpt.config)
        model = cls(cfg, dtype=dtype, seed=0)
        model.params.load_state_dict(ckpt.params)
        return model

    def clone(self):
        other = TextCapsModel(self.cfg, dtype=self.dtype, seed=0)
        other.params.load_state_dict(self.params.state_dict())
        return other
