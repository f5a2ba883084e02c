"""Central finite differences for gradient checks (float64, directional)."""

import torch


def randomize_(module, scale=0.3, seed=0):
    """Overwrite every parameter (zero-init ones included) with random values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def directional_check(fn, params, n_dirs=3, h=1e-6, seed=0, atol=1e-5):
    """Worst relative error between autograd and central differences along
    random directions in parameter space, one sweep per tensor plus joint ones.

    ``fn`` returns a scalar tensor and must be deterministic. Directions whose
    true derivative is zero (e.g. a key bias under softmax) are compared against
    an absolute floor ``atol`` instead of dividing rounding noise by zero.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    groups = [[i] for i in range(len(params))] + [list(range(len(params)))] * n_dirs
    for group in groups:
        dirs = {i: torch.randn(params[i].shape, generator=gen, dtype=params[i].dtype) for i in group}
        analytic = sum(float((grads[i] * dirs[i]).sum()) for i in group)
        with torch.no_grad():
            for i in group:
                params[i].add_(h * dirs[i])
            up = float(fn())
            for i in group:
                params[i].sub_(2 * h * dirs[i])
            down = float(fn())
            for i in group:
                params[i].add_(h * dirs[i])
        numeric = (up - down) / (2 * h)
        scale = max(abs(numeric), abs(analytic), atol)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst
