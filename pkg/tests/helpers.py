import torch


def randomize(module: torch.nn.Module, seed: int, std: float = 0.2) -> torch.nn.Module:
    """Overwrite every parameter with seeded noise (zero-init layers included)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in sorted(module.named_parameters()):
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return module


def finite_difference_audit(module, loss_fn, per_tensor=2, h=1e-4, seed=0, names=None):
    """Compare autograd gradients with central differences on sampled entries.

    Returns a list of ``(name, index, analytic, numeric, rel_err)``; the module
    is expected in float64.
    """
    params = dict(module.named_parameters())
    names = sorted(params) if names is None else names
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    grads = {n: params[n].grad.detach().clone() for n in names}
    g = torch.Generator().manual_seed(seed)
    rows = []
    with torch.no_grad():
        for n in names:
            p = params[n]
            flat = p.view(-1)
            picks = torch.randperm(flat.numel(), generator=g)[:per_tensor]
            for i in picks.tolist():
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                ana = grads[n].view(-1)[i].item()
                scale = max(abs(ana), abs(num), 1e-6)
                rows.append((n, i, ana, num, abs(ana - num) / scale))
    return rows


def max_rel_error(rows):
    return max(r[4] for r in rows)
