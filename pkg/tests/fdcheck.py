"""Independent central finite-difference gradient oracle for tests.

The implementation side is autograd; this utility recomputes gradients
by perturbing each element of each tensor at 64-bit and compares.
"""
import torch

STEP = 1e-5
TOL = 1e-4


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def finite_difference_grads(fn, tensor: torch.Tensor, step: float = STEP) -> torch.Tensor:
    """Central differences of the scalar fn() w.r.t. every element of tensor."""
    flat = tensor.data.reshape(-1)
    fd = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = fn().item()
        flat[i] = orig - step
        down = fn().item()
        flat[i] = orig
        fd[i] = (up - down) / (2.0 * step)
    return fd.reshape(tensor.shape)


def assert_grads_match(fn, tensors, step: float = STEP, tol: float = TOL,
                       atol: float = 1e-8):
    """Check autograd gradients of scalar fn() against finite differences.

    tensors must be float64 leaves with requires_grad=True and all
    participate in fn's output. The absolute floor covers parameters whose
    true gradient is structurally zero (e.g. key bias under softmax shift
    invariance), where both sides are pure rounding noise.
    """
    for t in tensors:
        assert t.dtype == torch.float64, "gradient checks run at 64-bit"
        assert t.requires_grad
    loss = fn()
    grads = torch.autograd.grad(loss, tensors)
    for t, g in zip(tensors, grads):
        with torch.no_grad():
            fd = finite_difference_grads(fn, t, step)
        diff = (g - fd).norm().item()
        bound = tol * max(g.norm().item(), fd.norm().item()) + atol
        assert diff <= bound, (f"gradient mismatch: |a-fd| {diff:.3e} > "
                               f"{bound:.3e} (rel err {rel_err(g, fd):.3e})")


def scalarize(out: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """Reduce a tensor output to a scalar with fixed random weights."""
    gen = torch.Generator().manual_seed(seed)
    w = torch.rand(out.shape, generator=gen, dtype=torch.float64)
    return (out * w).sum()
