"""The full segmentation network: text encoder, video encoder and decoder."""

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .decoder import Decoder, validate_resolutions
from .errors import ConfigError, NumericError
from .textenc import ConvTextEncoder
from .videoenc import ConvSpec, VideoEncoder, l2_normalize_positions

STREAM_CHANNELS = {"appearance": 3, "flow": 2}

# Defaults: 64x64 inputs shrink by a factor 16 to a 4x4 grid, 4 frames pool to 1.
_DEFAULT_KERNELS = ((3, 3, 3), (3, 3, 3), (3, 3, 3), (3, 3, 3))
_DEFAULT_STRIDES = ((1, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2))


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 16
    l_max: int = 8
    resolutions: tuple = (4, 16, 64)
    video_channels: tuple = (16, 32, 32, 32)
    video_kernels: tuple = _DEFAULT_KERNELS
    video_strides: tuple = _DEFAULT_STRIDES
    deconv_channels: tuple = (32, 32)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "resolutions", validate_resolutions(self.resolutions))
        object.__setattr__(self, "video_channels", tuple(int(c) for c in self.video_channels))
        object.__setattr__(self, "video_kernels",
                           tuple(tuple(int(k) for k in ks) for ks in self.video_kernels))
        object.__setattr__(self, "video_strides",
                           tuple(tuple(int(s) for s in ss) for ss in self.video_strides))
        object.__setattr__(self, "deconv_channels", tuple(int(c) for c in self.deconv_channels))
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be positive, got {self.embed_dim}")
        if self.l_max < 2:
            raise ConfigError(f"l_max must be >= 2, got {self.l_max}")
        n = len(self.video_channels)
        if len(self.video_kernels) != n or len(self.video_strides) != n:
            raise ConfigError(
                "video_channels, video_kernels and video_strides must have the same length"
            )
        if any(len(k) != 3 for k in self.video_kernels) or any(len(s) != 3 for s in self.video_strides):
            raise ConfigError("video kernels and strides must be (t, h, w) triples")
        stride = 1
        for s in self.video_strides:
            if s[1] != s[2]:
                raise ConfigError(f"spatial strides must be equal per layer, got {s}")
            stride *= s[1]
        if self.resolutions[0] * stride != self.resolutions[-1]:
            raise ConfigError(
                f"spatial stride product {stride} maps {self.resolutions[-1]} to "
                f"{self.resolutions[-1] // stride}, but the base resolution is {self.resolutions[0]}"
            )
        if len(self.deconv_channels) != len(self.resolutions) - 1:
            raise ConfigError(
                f"{len(self.resolutions)} resolutions need {len(self.resolutions) - 1} "
                f"deconv channel counts, got {len(self.deconv_channels)}"
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class SegmentationModel(nn.Module):
    """Sentence + clip -> response maps at every configured resolution.

    All parameters are drawn from one seeded generator in a fixed module
    order, so construction is deterministic for a given config.
    """

    def __init__(self, config: ModelConfig, in_channels):
        super().__init__()
        gen = torch.Generator().manual_seed(config.seed)
        layers = [
            ConvSpec(c, k, s)
            for c, k, s in zip(config.video_channels, config.video_kernels, config.video_strides)
        ]
        self.text = ConvTextEncoder(config.embed_dim, gen)
        self.video = VideoEncoder(in_channels, layers, gen)
        self.decoder = Decoder(config.resolutions, config.video_channels[-1],
                               config.deconv_channels, config.embed_dim, gen)
        self.config = config
        self.in_channels = in_channels

    def forward(self, rows, lengths, clips):
        if clips.shape[-1] != self.config.resolutions[-1] or clips.shape[-2] != clips.shape[-1]:
            raise ConfigError(
                f"clips are {clips.shape[-2]}x{clips.shape[-1]}, the model expects "
                f"{self.config.resolutions[-1]}x{self.config.resolutions[-1]}"
            )
        t = self.text(rows, lengths)
        grid = self.video(clips)
        return self.decoder(t, grid)


def build_model(config: ModelConfig, stream):
    if stream not in STREAM_CHANNELS:
        raise ConfigError(f"stream must be one of {sorted(STREAM_CHANNELS)}, got {stream!r}")
    return SegmentationModel(config, STREAM_CHANNELS[stream])


def _gap_shift(values, required, max_shift=2.0):
    """Bias shift that puts zero inside the widest gap of one channel's pre-activations.

    Candidates are the current position, every midpoint between consecutive
    sorted values, and points just past either tail (which turn the channel
    all-on or all-off). Returns (shift, margin after shifting); ties in margin
    prefer the smaller shift.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    cands = [0.0, 2.0 * required - v[0], -2.0 * required - v[-1]]
    cands.extend((-(v[:-1] + v[1:]) / 2.0).tolist())
    best_shift, best_margin = 0.0, float(np.min(np.abs(v)))
    for s in cands:
        if abs(s) > max_shift:
            continue
        m = float(np.min(np.abs(v + s)))
        if m > best_margin + 1e-12 or (abs(m - best_margin) <= 1e-12 and abs(s) < abs(best_shift)):
            best_shift, best_margin = s, m
    return best_shift, best_margin


@torch.no_grad()
def prepare_probe_point(model: SegmentationModel, rows, lengths, clips, eps=1e-3, slack=6.0):
    """Move the model to a parameter point where central differences are valid.

    A finite-difference probe of step eps moves any pre-activation by at most
    eps times the magnitude of the layer's input, so a probe window straddles
    a ReLU kink only when some pre-activation starts closer to zero than
    that. This shifts every ReLU bias into a wide gap of its channel's
    pre-activation distribution (for the given inputs) so that no kink can be
    crossed, and checks that max-pool winners and position norms keep a
    matching margin. The model is modified in place; the return value is the
    smallest achieved/required margin ratio (> 1 means every layer is safe).

    Raises NumericError when some channel has no wide-enough gap; building
    the problem from a different seed is the practical fix.
    """
    worst_ratio = float("inf")

    def fix(bias, per_channel, bound):
        nonlocal worst_ratio
        required = slack * eps * max(bound, 1.0)
        for c in range(per_channel.shape[0]):
            shift, margin = _gap_shift(per_channel[c].numpy(), required)
            if margin < required:
                raise NumericError(
                    f"no pre-activation gap of width {2 * required:.2e} available; "
                    "rebuild the problem from another seed"
                )
            bias[c] += shift
            worst_ratio = min(worst_ratio, margin / required)
        return required

    # Text: fix the window scores, then make sure the pool winner is clear.
    n_pos = rows.shape[1] - 1
    lengths_t = torch.as_tensor(lengths, dtype=torch.long)
    valid = torch.arange(n_pos).unsqueeze(0) < lengths_t.clamp(max=n_pos).unsqueeze(1)
    scores = model.text.window_scores(rows)
    required = fix(model.text.bias, scores[valid].t(), float(rows.abs().max()))
    u = torch.relu(model.text.window_scores(rows))
    u = u.masked_fill(~valid.unsqueeze(2), float("-inf"))
    if n_pos >= 2:
        top2 = u.topk(2, dim=1).values
        gap = top2[:, 0, :] - top2[:, 1, :]
        bad = (top2[:, 0, :] > 0) & (gap < 2 * required)
        if bool(bad.any()):
            raise NumericError("two pool windows are nearly tied; rebuild from another seed")

    # Video stack: fix each conv layer against its actual input.
    x = clips
    for layer in model.video.layers:
        fix(layer.bias, layer.pre_activation(x).transpose(0, 1).reshape(layer.bias.shape[0], -1),
            float(x.abs().max()))
        x = layer(x)
    v = x.mean(dim=2)
    if float(v.square().sum(dim=1).min()) < 0.01:
        raise NumericError("a feature grid position has near-zero norm; rebuild from another seed")
    feats = l2_normalize_positions(v)

    # Decoder blocks: both stages, then the per-position norms they feed.
    for block in model.decoder.blocks:
        fix(block.up_bias,
            block.upsample_pre(feats).transpose(0, 1).reshape(block.up_bias.shape[0], -1),
            float(feats.abs().max()))
        h = torch.relu(block.upsample_pre(feats))
        fix(block.conv_bias,
            block.refine_pre(h).transpose(0, 1).reshape(block.conv_bias.shape[0], -1),
            float(h.abs().max()))
        out = torch.relu(block.refine_pre(h))
        if float(out.square().sum(dim=1).min()) < 0.01:
            raise NumericError(
                "a pyramid position has near-zero norm; rebuild from another seed"
            )
        feats = l2_normalize_positions(out)
    return worst_ratio
