import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_default_dtype():
    torch.set_default_dtype(torch.float32)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def rand_t(rng, *shape, lo=0.0, hi=1.0, dtype=torch.float64):
    return torch.tensor(rng.uniform(lo, hi, size=shape), dtype=dtype)


def rel_grad_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom


def finite_difference_grad(fn, x: torch.Tensor, step: float = 1e-3) -> torch.Tensor:
    """Central finite differences of a scalar-valued fn wrt every element of x."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        f_plus = fn().item()
        flat[i] = orig - step
        f_minus = fn().item()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * step)
    return grad


def check_gradients(fn, inputs: dict, step: float = 1e-3, tol: float = 1e-3):
    """Compare autograd gradients of scalar fn(inputs) against central FD."""
    for t in inputs.values():
        t.requires_grad_(True)
    out = fn()
    out.backward()
    analytic = {k: t.grad.detach().clone() for k, t in inputs.items()}
    for t in inputs.values():
        t.requires_grad_(False)
    with torch.no_grad():
        for name, t in inputs.items():
            numeric = finite_difference_grad(fn, t, step)
            err = rel_grad_error(analytic[name], numeric)
            assert err < tol, f"gradient wrt {name}: rel error {err:.2e} >= {tol}"
    return analytic
