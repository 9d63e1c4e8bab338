"""Dual-flow network assembly: two recurrent flows, additive fusion, conv decoder.

Each flow runs a two-layer recurrent stack (or residual block) over its own
colour rendering of the same frames; the two final feature maps are added
elementwise and a single biased convolution plus sigmoid decodes them into a
per-pixel target probability for the final frame. Single-flow variants skip
the fusion and feed the decoder directly.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .color import extract_y, rgb_to_hsv, rgb_to_yuv
from .recurrent import ConvMguBlock, ConvMguStack2, _uniform, count_actual_params
from .tensor import Tensor, add, conv2d_same, sigmoid, zeros

__all__ = [
    "SPACE_CHANNELS",
    "PRESET_CHANNELS",
    "DFlowConfig",
    "DFlowModel",
    "build_dflow",
    "dflow_forward",
    "single_flow_forward",
    "frames_for_flow",
]

SPACE_CHANNELS = {"rgb": 3, "yuv": 3, "hsv": 3, "y": 1}

# feature-map widths of the two shipped presets
PRESET_CHANNELS = {"small": 16, "base": 40}


@dataclass(frozen=True)
class DFlowConfig:
    flow_a_space: str = "rgb"
    flow_b_space: str | None = "yuv"
    channels: int = 40
    kernel_size: int = 3
    k: int = 4
    use_block: bool = False
    shortcut_kernel_size: int = 3
    decoder_kernel_size: int = 3

    def __post_init__(self):
        if self.flow_a_space not in SPACE_CHANNELS:
            raise ValueError(f"unknown colour space {self.flow_a_space!r}")
        if self.flow_b_space is not None and self.flow_b_space not in SPACE_CHANNELS:
            raise ValueError(f"unknown colour space {self.flow_b_space!r}")
        if self.channels < 1 or self.k < 1:
            raise ValueError("channels and k must be >= 1")
        for name in ("kernel_size", "shortcut_kernel_size", "decoder_kernel_size"):
            val = getattr(self, name)
            if val < 1 or val % 2 == 0:
                raise ValueError(f"{name} must be odd and positive, got {val}")

    @property
    def dual_flow(self):
        return self.flow_b_space is not None

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return DFlowConfig(**d)


def frames_for_flow(frames_rgb, space):
    """Render a list of RGB ColorImages into one flow's input tensors."""
    if space == "rgb":
        return [Tensor(img.pixels) for img in frames_rgb]
    if space == "yuv":
        return [Tensor(rgb_to_yuv(img).pixels) for img in frames_rgb]
    if space == "hsv":
        return [Tensor(rgb_to_hsv(img).pixels) for img in frames_rgb]
    if space == "y":
        return [Tensor(extract_y(rgb_to_yuv(img))) for img in frames_rgb]
    raise ValueError(f"unknown colour space {space!r}")


class DFlowModel:
    """Built network: flows plus decoder. Immutable during inference."""

    def __init__(self, config, flow_a, flow_b, decoder_w, decoder_b):
        self.config = config
        self.flow_a = flow_a
        self.flow_b = flow_b
        self.decoder_w = decoder_w
        self.decoder_b = decoder_b

    def parameters(self):
        out = {}
        for tag, flow in (("flow_a", self.flow_a), ("flow_b", self.flow_b)):
            if flow is None:
                continue
            for name, t in flow.parameters().items():
                out[f"{tag}.{name}"] = t
        out["decoder.w"] = self.decoder_w
        out["decoder.b"] = self.decoder_b
        return out

    def n_params(self):
        return count_actual_params(self)

    def _decode(self, features):
        return sigmoid(conv2d_same(features, self.decoder_w, self.decoder_b))

    def forward(self, frames_a, frames_b):
        """Dual-flow forward; returns the (1, H, W) probability map for the
        final frame. Both sequences must hold k+1 frames of equal spatial size."""
        if self.flow_b is None:
            raise ValueError("dual-flow forward called on a single-flow model")
        expected = self.config.k + 1
        if len(frames_a) != expected or len(frames_b) != expected:
            raise ValueError(
                f"both flows need {expected} frames, got {len(frames_a)} and {len(frames_b)}")
        for fa, fb in zip(frames_a, frames_b):
            if fa.data.shape[1:] != fb.data.shape[1:]:
                raise ValueError(
                    f"spatial mismatch between flows: {fa.data.shape[1:]} vs {fb.data.shape[1:]}")
        fused = add(self.flow_a.forward(frames_a), self.flow_b.forward(frames_b))
        return self._decode(fused)

    def forward_single(self, frames):
        """Single-flow forward: decoder applied to the lone flow's features."""
        if self.flow_b is not None:
            raise ValueError("single-flow forward called on a dual-flow model")
        if len(frames) != self.config.k + 1:
            raise ValueError(f"flow needs {self.config.k + 1} frames, got {len(frames)}")
        return self._decode(self.flow_a.forward(frames))

    def forward_window(self, frames_rgb):
        """Forward from raw RGB frames, rendering each flow's colour space."""
        frames_a = frames_for_flow(frames_rgb, self.config.flow_a_space)
        if self.flow_b is None:
            return self.forward_single(frames_a)
        frames_b = frames_for_flow(frames_rgb, self.config.flow_b_space)
        return self.forward(frames_a, frames_b)

    def predict(self, frames_rgb):
        """Inference-only probabilities as a plain (1, H, W) array."""
        return self.forward_window(frames_rgb).data


def _build_flow(config, space, rng):
    cin = SPACE_CHANNELS[space]
    if config.use_block:
        return ConvMguBlock(cin, config.channels, config.kernel_size,
                            config.shortcut_kernel_size, rng)
    return ConvMguStack2(cin, config.channels, config.kernel_size, rng)


def build_dflow(config, seed):
    """Deterministically initialise a model from ``seed``.

    The same (config, seed) pair always yields bit-identical parameters."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    flow_a = _build_flow(config, config.flow_a_space, rng)
    flow_b = _build_flow(config, config.flow_b_space, rng) if config.dual_flow else None
    d = config.decoder_kernel_size
    decoder_w = _uniform(rng, (1, config.channels, d, d), config.channels * d * d)
    decoder_b = zeros((1,), requires_grad=True)
    return DFlowModel(config, flow_a, flow_b, decoder_w, decoder_b)


def dflow_forward(model, frames_a, frames_b):
    """Dual-flow forward pass (module-level spelling of model.forward)."""
    return model.forward(frames_a, frames_b)


def single_flow_forward(model, frames):
    """Single-flow forward pass (module-level spelling of model.forward_single)."""
    return model.forward_single(frames)
