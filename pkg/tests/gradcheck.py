"""Central finite-difference gradient oracle.

The oracle only calls the forward function; autograd is consulted solely for
the values being checked.  Relative error per component is
|analytic - numeric| / max(|analytic|, |numeric|, 1e-3 * max|analytic|), so
components that are tiny compared with the gradient as a whole are judged on
the gradient's scale rather than their own.
"""

import math

import torch

H = 1e-6


def random_reparameterize(module, gen, weight_scale=1.0):
    """Redraw every parameter from a fan-in scaled normal (biases nonzero too)."""
    with torch.no_grad():
        for p in module.parameters():
            fan_in = p[0].numel() if p.dim() > 1 else 1
            std = weight_scale / math.sqrt(fan_in) if p.dim() > 1 else 0.1
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def relative_errors(analytic, numeric):
    a = torch.as_tensor(analytic, dtype=torch.float64)
    n = torch.as_tensor(numeric, dtype=torch.float64)
    floor = 1e-3 * float(a.abs().max()) if a.numel() else 0.0
    den = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(max(floor, 1e-300), dtype=torch.float64))
    return (a - n).abs() / den


def check(fn, tensors, coords=None, gen=None, h=H):
    """Max relative error between autograd and central differences.

    ``fn`` maps nothing to a scalar tensor and reads ``tensors`` (leaf tensors
    with ``requires_grad``).  ``coords`` limits the check to that many random
    coordinates per tensor; ``None`` checks every coordinate.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    analytic, numeric = [], []
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            if coords is None or coords >= flat.numel():
                idx = range(flat.numel())
            else:
                idx = torch.randperm(flat.numel(), generator=gen)[:coords].tolist()
            for i in idx:
                old = flat[i].item()
                flat[i] = old + h
                fp = fn().item()
                flat[i] = old - h
                fm = fn().item()
                flat[i] = old
                numeric.append((fp - fm) / (2 * h))
                analytic.append(g.view(-1)[i].item())
    return float(relative_errors(analytic, numeric).max())


def projection(shape, gen):
    """Fixed random weights that turn a tensor output into a scalar."""
    return torch.randn(shape, generator=gen, dtype=torch.float64)
