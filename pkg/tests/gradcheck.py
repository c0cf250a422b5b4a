"""Central finite differences for scalar functions of tensors (float64)."""

import torch


def numeric_grad(fn, x, h=1e-6, indices=None):
    flat = x.detach().clone().reshape(-1)
    indices = range(flat.numel()) if indices is None else indices
    out = {}
    with torch.no_grad():
        for i in indices:
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(fn(flat.view_as(x)))
            flat[i] = orig - h
            fm = float(fn(flat.view_as(x)))
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic, numeric, floor=1e-7):
    """|a - n| / max(|a|, |n|, floor); the floor makes structurally zero gradients an absolute check."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def max_relative_error(fn, x, h=1e-6):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    num = numeric_grad(lambda v: fn(v), x.detach(), h)
    gflat = g.reshape(-1)
    return max(relative_error(gflat[i].item(), n) for i, n in num.items())


def param_relative_errors(module, loss_fn, per_tensor=6, h=1e-6, seed=0, floor=1e-5):
    """Max relative error of d loss / d param over a sample of entries of every parameter tensor."""
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    gen = torch.Generator().manual_seed(seed)
    errors = {}
    for name, p in module.named_parameters():
        if p.grad is None:
            continue
        n = p.numel()
        idx = torch.randperm(n, generator=gen)[:per_tensor].tolist()
        flat = p.data.view(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                fp = float(loss_fn())
                flat[i] = orig - h
                fm = float(loss_fn())
                flat[i] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, relative_error(p.grad.view(-1)[i].item(), num, floor))
        errors[name] = worst
    return errors
