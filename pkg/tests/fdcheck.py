"""Central finite-difference gradient comparison used across the suites."""
import torch


def max_relative_error(f, tensors, step=1e-4, max_entries=24, generator_seed=0):
    """Largest norm-wise relative error between autograd and central differences.

    ``f`` returns a scalar; every tensor in ``tensors`` must be a leaf requiring grad.
    For each tensor, up to ``max_entries`` entries (evenly chosen) are perturbed.
    """
    for t in tensors:
        t.grad = None
    f().backward()
    worst = 0.0
    gen = torch.Generator().manual_seed(generator_seed)
    for t in tensors:
        analytic = t.grad.detach().reshape(-1).clone()
        n = analytic.numel()
        idx = torch.randperm(n, generator=gen)[:max_entries] if n > max_entries else torch.arange(n)
        numeric = torch.empty(len(idx), dtype=torch.float64)
        flat = t.data.view(-1)
        with torch.no_grad():
            for j, i in enumerate(idx.tolist()):
                old = flat[i].item()
                flat[i] = old + step
                up = f().item()
                flat[i] = old - step
                down = f().item()
                flat[i] = old
                numeric[j] = (up - down) / (2 * step)
        a = analytic[idx].double()
        scale = max(a.norm().item(), numeric.norm().item(), 1e-12)
        worst = max(worst, (a - numeric).norm().item() / scale)
    return worst
