"""Multi-resolution pixel-wise logistic loss and a finite-difference gradient checker."""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, InputError, NumericError


def downsample_mask(mask, r):
    """Downsample a binary mask to r x r by per-block majority vote.

    A block whose foreground fraction is >= 0.5 (ties included) becomes +1,
    otherwise -1. Returns an int8 array of {-1, +1}.
    """
    y = np.asarray(mask)
    if y.ndim != 2 or y.shape[0] != y.shape[1]:
        raise InputError(f"mask must be square, got shape {y.shape}")
    size = y.shape[0]
    if r < 1 or size % r != 0:
        raise InputError(f"target resolution {r} does not divide mask size {size}")
    k = size // r
    frac = (y > 0).astype(np.float64).reshape(r, k, r, k).mean(axis=(1, 3))
    return np.where(frac >= 0.5, 1, -1).astype(np.int8)


def mask_pyramid(mask, resolutions):
    """Build {r: downsample_mask(mask, r)} for every requested resolution."""
    return {int(r): downsample_mask(mask, int(r)) for r in resolutions}


def pixel_loss(s, y):
    """log(1 + exp(-s*y)), evaluated in the shifted form when -s*y is large.

    Accepts tensors or plain numbers; plain numbers are promoted to float64.
    Both branches are computed on clamped arguments so neither forward nor
    backward ever sees an overflowing exp.
    """
    if not isinstance(s, torch.Tensor):
        s = torch.tensor(s, dtype=torch.float64)
    y = torch.as_tensor(y, dtype=s.dtype, device=s.device)
    z = -s * y
    small = torch.log1p(torch.exp(z.clamp(max=30.0)))
    large = z + torch.log1p(torch.exp((-z).clamp(max=0.0)))
    return torch.where(z > 30.0, large, small)


def total_loss(responses, labels, weights):
    """Weighted sum over resolutions of the per-pixel mean logistic loss.

    responses and labels map resolution -> (r, r) or (B, r, r); weights maps
    resolution -> alpha_r >= 0 with at least one positive entry. Batched
    inputs yield the batch mean of the per-sample losses.
    """
    if set(responses) != set(labels) or set(responses) != set(weights):
        raise ConfigError(
            f"resolution keys disagree: responses {sorted(responses)}, "
            f"labels {sorted(labels)}, weights {sorted(weights)}"
        )
    if not responses:
        raise ConfigError("loss needs at least one resolution")
    w = {r: float(weights[r]) for r in weights}
    if any(v < 0 for v in w.values()):
        raise ConfigError("loss weights must be non-negative")
    if sum(w.values()) <= 0:
        raise ConfigError("at least one loss weight must be positive")
    total = None
    for r in sorted(responses):
        s = responses[r]
        if not isinstance(s, torch.Tensor):
            s = torch.as_tensor(s, dtype=torch.float64)
        y = torch.as_tensor(labels[r], dtype=s.dtype, device=s.device)
        if s.shape != y.shape:
            raise ConfigError(f"level {r}: response shape {tuple(s.shape)} != labels {tuple(y.shape)}")
        if s.shape[-2:] != (r, r):
            raise ConfigError(f"level {r}: maps have spatial shape {tuple(s.shape[-2:])}")
        term = w[r] * pixel_loss(s, y).mean(dim=(-2, -1))
        total = term if total is None else total + term
    return total.mean() if total.dim() > 0 else total


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    block_errors: dict  # block name -> max relative error

    @property
    def passed(self):
        return all(err <= self.tol for err in self.block_errors.values())

    @property
    def worst_block(self):
        return max(self.block_errors, key=self.block_errors.get)

    def lines(self):
        width = max(len(n) for n in self.block_errors)
        out = []
        for name, err in sorted(self.block_errors.items()):
            flag = "ok  " if err <= self.tol else "FAIL"
            out.append(f"{flag} {name:<{width}}  max rel err {err:.3e}")
        return out


def grad_check(closure, params, eps=1e-3, tol=1e-2, denom_floor=1e-4,
               max_entries_per_block=None, seed=0):
    """Compare autograd gradients of `closure` against central finite differences.

    closure must deterministically recompute the scalar loss from the current
    values of `params` (name -> leaf tensor with requires_grad). Relative
    error per coordinate is |a - n| / max(|a|, |n|, denom_floor), so
    coordinates whose gradient is near zero are compared on an absolute
    scale of tol * denom_floor. max_entries_per_block caps how many
    coordinates of each block are probed (a seeded choice); None probes all.
    """
    for p in params.values():
        p.grad = None
    loss = closure()
    if not torch.isfinite(loss):
        raise NumericError(f"gradient check loss is non-finite: {loss.item()}")
    loss.backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params.items()
    }
    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            ana = analytic[name].reshape(-1)
            n = flat.numel()
            if max_entries_per_block is not None and n > max_entries_per_block:
                idxs = np.sort(rng.choice(n, size=max_entries_per_block, replace=False))
            else:
                idxs = range(n)
            worst = 0.0
            for i in idxs:
                orig = flat[i].item()
                flat[i] = orig + eps
                lp = float(closure())
                flat[i] = orig - eps
                lm = float(closure())
                flat[i] = orig
                if not (math.isfinite(lp) and math.isfinite(lm)):
                    raise NumericError(f"non-finite loss while probing {name}[{i}]")
                num = (lp - lm) / (2.0 * eps)
                a = float(ana[i])
                rel = abs(a - num) / max(abs(a), abs(num), denom_floor)
                if rel > worst:
                    worst = rel
            errors[name] = worst
    return GradCheckReport(eps=eps, tol=tol, block_errors=errors)
