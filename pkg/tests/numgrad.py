"""Central finite-difference gradient checking for torch modules."""

import torch


def finite_difference_grads(loss_fn, params: dict, eps: float = 1e-6) -> dict:
    """Numerical gradient of ``loss_fn()`` w.r.t. every tensor in ``params``.

    loss_fn must be a pure function of the current parameter values (it is
    re-evaluated 2x per scalar entry). Tensors should be float64.
    """
    grads = {}
    with torch.no_grad():
        for name, p in params.items():
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn()
                flat[i] = orig - eps
                down = loss_fn()
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * eps)
            grads[name] = g
    return grads


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-3):
    """Worst relative disagreement across all tensors, with the tensor name."""
    worst = 0.0
    worst_name = None
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
        rel = ((a - n).abs() / denom).max().item()
        if rel > worst:
            worst, worst_name = rel, name
    return worst, worst_name
