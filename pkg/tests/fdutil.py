"""Finite-difference helpers shared by gradient-check tests."""

import torch


def fd_grad(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of scalar fn w.r.t. tensor x."""
    grad = torch.zeros_like(x, dtype=torch.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        hi = float(fn().detach())
        flat[i] = orig - h
        lo = float(fn().detach())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = torch.linalg.vector_norm((a - b).reshape(-1))
    den = max(
        float(torch.linalg.vector_norm(a.reshape(-1))),
        float(torch.linalg.vector_norm(b.reshape(-1))),
        1e-12,
    )
    return float(num) / den
