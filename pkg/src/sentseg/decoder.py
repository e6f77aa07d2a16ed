"""Feature pyramid upsampling and sentence-conditioned response maps.

A base feature grid is upsampled through deconvolution blocks (4x per level);
at every level the sentence vector is mapped to one filter value per channel
and the response is the per-position dot product between that filter and the
feature vector.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .nninit import bilinear_upsample_init, near_identity_init, uniform_fan_in
from .videoenc import coordinate_channels, l2_normalize_positions


def validate_resolutions(resolutions):
    """Check the resolution chain grows exactly 4x per level; return it as a tuple."""
    rs = tuple(int(r) for r in resolutions)
    if not rs:
        raise ConfigError("need at least one resolution")
    if rs[0] < 1:
        raise ConfigError(f"resolutions must be positive, got {rs[0]}")
    for a, b in zip(rs, rs[1:]):
        if b != 4 * a:
            raise ConfigError(f"resolutions must grow exactly 4x per level, got {a} -> {b}")
    return rs


class DeconvBlock(nn.Module):
    """Transposed 8x8 stride-4 conv (exact 4x upsampling) plus a 3x3 refinement conv.

    With input padding 2 the transposed conv maps r -> 4r with no leftover
    rows; both stages are followed by ReLU.

    Both stages start as transport maps (bilinear upsampling, identity) with
    noise on top rather than as pure noise: a freshly built pyramid then
    carries the base grid's content to every level, and the per-level filters
    have something sentence-discriminative to read from the first iteration.
    A noise-only start scrambles the base grid beyond linear recovery, and
    training finds a sentence-independent shortcut before it ever repairs the
    upsampling path. The noise bound must stay well under the transport
    coefficients or that property is lost.
    """

    def __init__(self, in_channels, out_channels, generator=None):
        super().__init__()
        # Each upsampled position receives in_channels * (8/4)^2 contributions.
        fan_up = in_channels * 4
        noise_up = 0.25 / math.sqrt(fan_up)
        self.up_weight = nn.Parameter(
            bilinear_upsample_init(in_channels, out_channels, noise_up, generator)
        )
        self.up_bias = nn.Parameter(uniform_fan_in((out_channels,), fan_in=16.0 * fan_up, generator=generator))
        fan_conv = out_channels * 9
        noise_conv = 0.25 / math.sqrt(fan_conv)
        self.conv_weight = nn.Parameter(near_identity_init(out_channels, noise_conv, generator))
        self.conv_bias = nn.Parameter(uniform_fan_in((out_channels,), fan_in=16.0 * fan_conv, generator=generator))

    def upsample_pre(self, x):
        """Transposed-conv output before its ReLU."""
        return F.conv_transpose2d(x, self.up_weight, self.up_bias, stride=4, padding=2)

    def refine_pre(self, h):
        """Refinement-conv output before its ReLU."""
        return F.conv2d(h, self.conv_weight, self.conv_bias, padding=1)

    def forward(self, x):
        return F.relu(self.refine_pre(F.relu(self.upsample_pre(x))))


class FilterHead(nn.Module):
    """Affine map plus tanh: sentence vector -> one filter value per channel."""

    def __init__(self, text_dim, out_channels, generator=None):
        super().__init__()
        self.weight = nn.Parameter(uniform_fan_in((out_channels, text_dim), fan_in=text_dim, generator=generator))
        self.bias = nn.Parameter(uniform_fan_in((out_channels,), fan_in=text_dim, generator=generator))

    def forward(self, t):
        if t.shape[-1] != self.weight.shape[1]:
            raise ConfigError(f"sentence vector has dim {t.shape[-1]}, head expects {self.weight.shape[1]}")
        return torch.tanh(F.linear(t, self.weight, self.bias))


class Decoder(nn.Module):
    """Builds the multi-resolution pyramid and scores it against sentence filters.

    level channels: [base_channels, *deconv_channels] feature channels per
    level, before the two coordinate channels every level carries on top.
    """

    def __init__(self, resolutions, base_channels, deconv_channels, text_dim, generator=None):
        super().__init__()
        self.resolutions = validate_resolutions(resolutions)
        deconv_channels = tuple(int(c) for c in deconv_channels)
        if len(deconv_channels) != len(self.resolutions) - 1:
            raise ConfigError(
                f"{len(self.resolutions)} resolutions need {len(self.resolutions) - 1} deconv "
                f"channel counts, got {len(deconv_channels)}"
            )
        if any(c < 1 for c in deconv_channels):
            raise ConfigError("deconv channel counts must be positive")
        self.level_channels = (int(base_channels), *deconv_channels)
        self.blocks = nn.ModuleList(
            DeconvBlock(cin, cout, generator)
            for cin, cout in zip(self.level_channels, self.level_channels[1:])
        )
        self.heads = nn.ModuleList(FilterHead(text_dim, c + 2, generator) for c in self.level_channels)

    def _coords(self, r, batch, dtype):
        coords = coordinate_channels(r).to(dtype=dtype).permute(2, 0, 1)
        return coords.unsqueeze(0).expand(batch, -1, -1, -1)

    def build_pyramid(self, grid):
        """grid: (B, base_channels + 2, r0, r0) -> {r: (B, C_r + 2, r, r)}.

        Each deconv block consumes the previous level's feature channels
        (coordinates stripped), and its output is re-normalized and gets
        fresh coordinate channels for the new resolution.
        """
        r0 = self.resolutions[0]
        base_c = self.level_channels[0]
        if grid.dim() != 4 or grid.shape[1] != base_c + 2:
            raise ConfigError(
                f"expected base grid with {base_c + 2} channels, got shape {tuple(grid.shape)}"
            )
        if grid.shape[2] != r0 or grid.shape[3] != r0:
            raise ConfigError(f"base grid is {grid.shape[2]}x{grid.shape[3]}, expected {r0}x{r0}")
        pyramid = {r0: grid}
        feats = grid[:, :base_c]
        for r, block in zip(self.resolutions[1:], self.blocks):
            feats = l2_normalize_positions(block(feats))
            pyramid[r] = torch.cat([feats, self._coords(r, feats.shape[0], feats.dtype)], dim=1)
        return pyramid

    def generate_filters(self, t):
        """Sentence vector(s) (B, D) -> {r: (B, C_r + 2)} tanh-bounded filters."""
        if t.dim() == 1:
            t = t.unsqueeze(0)
        return {r: head(t) for r, head in zip(self.resolutions, self.heads)}

    def respond(self, pyramid, filters):
        """Per-position dot product between each level's features and its filter."""
        out = {}
        for r in self.resolutions:
            v = pyramid[r]
            f = filters[r]
            if v.shape[1] != f.shape[1]:
                raise ConfigError(
                    f"level {r} has {v.shape[1]} channels but its filter has {f.shape[1]}"
                )
            out[r] = torch.einsum("bchw,bc->bhw", v, f)
        return out

    def forward(self, t, grid):
        return self.respond(self.build_pyramid(grid), self.generate_filters(t))


def predict_mask(s):
    """Binarize a response map: strictly positive response means foreground."""
    if isinstance(s, torch.Tensor):
        s = s.detach().cpu().numpy()
    return (np.asarray(s) > 0).astype(np.uint8)
