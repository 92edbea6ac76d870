"""Central finite-difference gradient oracle."""

import torch


def numeric_gradient(fn, tensor, index, eps):
    flat = tensor.data.view(-1)
    orig = flat[index].item()
    with torch.no_grad():
        flat[index] = orig + eps
        up = float(fn())
        flat[index] = orig - eps
        down = float(fn())
    flat[index] = orig
    return (up - down) / (2 * eps)


def gradient_error(fn, tensors, eps=1e-6, max_per_tensor=12, seed=0):
    """Relative error between autograd and central differences.

    Compares at most ``max_per_tensor`` randomly chosen entries of each tensor
    and returns ``||analytic - numeric|| / max(||analytic||, ||numeric||)`` over
    all compared entries together.
    """
    gen = torch.Generator().manual_seed(seed)
    grads = torch.autograd.grad(fn(), tensors, allow_unused=True)
    analytic, numeric = [], []
    for x, g in zip(tensors, grads):
        g = torch.zeros_like(x) if g is None else g
        n = x.numel()
        idx = torch.randperm(n, generator=gen)[:max_per_tensor].tolist()
        for i in idx:
            analytic.append(g.reshape(-1)[i].item())
            numeric.append(numeric_gradient(fn, x, i, eps))
    a = torch.tensor(analytic, dtype=torch.float64)
    b = torch.tensor(numeric, dtype=torch.float64)
    scale = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / scale
