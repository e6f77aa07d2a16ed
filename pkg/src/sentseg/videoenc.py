"""Video encoder: strided 3D convolutions, temporal pooling, per-position
L2 normalization, and coordinate channels.

The conv stack is configurable; the default used elsewhere in the package
downsamples 64x64 inputs to a 4x4 feature grid and pools 4 frames to one.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError
from .nninit import uniform_fan_in


@dataclass
class VideoClip:
    """Frame stack of shape (n_frames, H, W, C).

    kind "appearance" carries C=3 color channels in [0, 1]; kind "flow"
    carries C=2 per-pixel displacement channels (dx, dy) in pixels per frame.
    """

    frames: np.ndarray
    kind: str = "appearance"

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4:
            raise InputError(f"clip frames must be 4-dimensional, got shape {f.shape}")
        expected = {"appearance": 3, "flow": 2}.get(self.kind)
        if expected is None:
            raise InputError(f"unknown clip kind {self.kind!r}")
        if f.shape[3] != expected:
            raise InputError(f"{self.kind} clip needs {expected} channels, got {f.shape[3]}")
        if f.shape[0] < 1:
            raise InputError("clip needs at least one frame")

    @property
    def n_frames(self):
        return self.frames.shape[0]


def coordinate_channels(r):
    """(r, r, 2) grid: channel 0 ramps -1..+1 across columns, channel 1 across rows.

    r = 1 has no extent to span, so both channels are zero there.
    """
    if r < 1:
        raise InputError(f"resolution must be >= 1, got {r}")
    if r == 1:
        return torch.zeros(1, 1, 2)
    line = torch.linspace(-1.0, 1.0, r)
    out = torch.empty(r, r, 2)
    out[:, :, 0] = line.unsqueeze(0)
    out[:, :, 1] = line.unsqueeze(1)
    return out


def l2_normalize_positions(x):
    """Unit-normalize the channel vector at every spatial position of (B, C, H, W).

    Positions whose vector is exactly zero are left at zero; no epsilon is
    folded into nonzero norms. The clamp below only guards autograd against
    0/0 at those zero positions.
    """
    ss = x.pow(2).sum(dim=1, keepdim=True)
    denom = ss.clamp_min(1e-24).sqrt()
    return torch.where(ss > 0, x / denom, x)


def pad_same(x, kernel):
    """Zero-pad the trailing (T, H, W) dims: left (k-1)//2, right k//2 per dim.

    A strided conv over the padded tensor yields exactly ceil(n/s) outputs.
    """
    kt, kh, kw = kernel
    pads = (
        (kw - 1) // 2, kw // 2,
        (kh - 1) // 2, kh // 2,
        (kt - 1) // 2, kt // 2,
    )
    return F.pad(x, pads)


@dataclass(frozen=True)
class ConvSpec:
    """One conv layer: output channels, (kt, kh, kw) kernel, (st, sh, sw) stride."""

    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)


class Conv3dLayer(nn.Module):
    def __init__(self, in_channels, spec: ConvSpec, generator=None):
        super().__init__()
        kt, kh, kw = spec.kernel
        st, sh, sw = spec.stride
        if min(kt, kh, kw) < 1 or min(st, sh, sw) < 1:
            raise ConfigError(f"kernel and stride entries must be positive: {spec}")
        if sh != sw:
            raise ConfigError(f"spatial strides must match to keep the grid square: {spec}")
        if spec.out_channels < 1:
            raise ConfigError(f"layer needs at least one output channel: {spec}")
        fan_in = in_channels * kt * kh * kw
        self.weight = nn.Parameter(
            uniform_fan_in((spec.out_channels, in_channels, kt, kh, kw), fan_in=fan_in, generator=generator)
        )
        self.bias = nn.Parameter(uniform_fan_in((spec.out_channels,), fan_in=fan_in, generator=generator))
        self.kernel = spec.kernel
        self.stride = spec.stride

    def pre_activation(self, x):
        """Conv output before the ReLU."""
        return F.conv3d(pad_same(x, self.kernel), self.weight, self.bias, stride=self.stride)

    def forward(self, x):
        return F.relu(self.pre_activation(x))


class VideoEncoder(nn.Module):
    """Conv stack -> temporal mean -> L2 normalization -> coordinate channels.

    forward maps (B, C_in, T, H, W) to (B, out_channels + 2, r, r) where r is
    H divided by the product of the spatial strides. The last two channels
    are the x and y coordinate ramps, appended after normalization.
    """

    def __init__(self, in_channels, layers, generator=None):
        super().__init__()
        if not layers:
            raise ConfigError("video encoder needs at least one conv layer")
        mods = []
        c = in_channels
        for spec in layers:
            mods.append(Conv3dLayer(c, spec, generator))
            c = spec.out_channels
        self.layers = nn.ModuleList(mods)
        self.in_channels = in_channels
        self.out_channels = c

    def spatial_stride(self):
        p = 1
        for layer in self.layers:
            p *= layer.stride[1]
        return p

    def forward(self, x):
        if x.dim() != 5:
            raise ConfigError(f"expected clips of shape (B, C, T, H, W), got {tuple(x.shape)}")
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"clip has {x.shape[1]} channels, encoder expects {self.in_channels}")
        for layer in self.layers:
            x = layer(x)
        x = x.mean(dim=2)
        x = l2_normalize_positions(x)
        b, _, h, w = x.shape
        if h != w:
            raise ConfigError(f"feature grid must be square, got {h}x{w}")
        coords = coordinate_channels(h).to(dtype=x.dtype).permute(2, 0, 1)
        coords = coords.unsqueeze(0).expand(b, -1, -1, -1)
        return torch.cat([x, coords], dim=1)


def encode_video(clip: VideoClip, encoder: VideoEncoder):
    """Encode one clip to its (r, r, out_channels + 2) feature grid."""
    frames = np.asarray(clip.frames, dtype=np.float32)
    if frames.shape[1] != frames.shape[2]:
        raise ConfigError(f"frames must be square, got {frames.shape[1]}x{frames.shape[2]}")
    if frames.shape[3] != encoder.in_channels:
        raise ConfigError(
            f"{clip.kind} clip has {frames.shape[3]} channels, encoder expects {encoder.in_channels}"
        )
    x = torch.from_numpy(frames).permute(3, 0, 1, 2).unsqueeze(0)
    return encoder(x).squeeze(0).permute(1, 2, 0)
