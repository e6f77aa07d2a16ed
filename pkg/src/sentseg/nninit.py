"""Seeded parameter initialization used by every trainable block."""

import math

import torch


def uniform_fan_in(shape, fan_in, generator=None):
    """Uniform tensor in [-1/sqrt(fan_in), +1/sqrt(fan_in)].

    `fan_in` is the number of inputs contributing to one output unit, so the
    initial pre-activations stay O(1) regardless of layer width.
    """
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=generator) * 2.0 - 1.0) * bound


def _noise(shape, bound, generator):
    return (torch.rand(shape, generator=generator) * 2.0 - 1.0) * bound


def bilinear_4x_kernel():
    """8x8 stride-4 kernel whose taps form a partition of unity per output.

    Tap weight is the product of triangular ramps 1 - |d|/4 around the kernel
    center, the standard bilinear-interpolation kernel for 4x upsampling.
    """
    ramp = 1.0 - torch.abs(torch.arange(8, dtype=torch.float32) - 3.5) / 4.0
    return torch.outer(ramp, ramp)


def bilinear_upsample_init(in_channels, out_channels, noise_bound, generator=None):
    """(in, out, 8, 8) transposed-conv weight that starts as bilinear 4x upsampling.

    Output channel c interpolates input channel c % in_channels, so the layer
    initially transports its input upward instead of scrambling it; the added
    uniform noise breaks the symmetry between replicated channels. A fresh
    network then produces high-resolution grids that are smooth blends of the
    base-grid vectors, which keeps whatever the base grid separates linearly
    separable after upsampling.
    """
    kernel = bilinear_4x_kernel()
    w = torch.zeros(in_channels, out_channels, 8, 8)
    for co in range(out_channels):
        w[co % in_channels, co] = kernel
    return w + _noise(w.shape, noise_bound, generator)


def near_identity_init(channels, noise_bound, generator=None):
    """(c, c, 3, 3) conv weight that starts as the identity map plus noise."""
    w = _noise((channels, channels, 3, 3), noise_bound, generator)
    for c in range(channels):
        w[c, c, 1, 1] += 1.0
    return w
