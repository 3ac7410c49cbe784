"""Central finite-difference oracle for gradient tests (double precision)."""
import torch

EPS = 1e-5


def numeric_grad(fn, x: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Central-difference gradient of scalar ``fn()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn())
            flat[i] = orig - eps
            lo = float(fn())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return g


def directional(fn, params, directions, eps: float = EPS) -> float:
    """Central difference of ``fn`` along a joint direction over several tensors."""
    with torch.no_grad():
        for p, d in zip(params, directions):
            p.add_(eps * d)
        hi = float(fn())
        for p, d in zip(params, directions):
            p.sub_(2 * eps * d)
        lo = float(fn())
        for p, d in zip(params, directions):
            p.add_(eps * d)
    return (hi - lo) / (2 * eps)


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / b.norm().clamp_min(1e-12))


def check_input_grad(fn, x: torch.Tensor, eps: float = EPS) -> float:
    """Relative error between autograd and central differences for d fn / d x."""
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    (ga,) = torch.autograd.grad(out, x)
    gn = numeric_grad(lambda: fn(x), x, eps)
    return rel_err(ga, gn)


def check_param_grads(fn, params, n_dirs: int = 3, seed: int = 0, eps: float = EPS) -> float:
    """Max relative error of directional derivatives along random unit-norm joint directions."""
    params = [p for p in params if p.requires_grad]
    out = fn()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        norm = sum(float((d ** 2).sum()) for d in dirs) ** 0.5
        dirs = [d / norm for d in dirs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        numeric = directional(fn, params, dirs, eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-8))
    return worst
