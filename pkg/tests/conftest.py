import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def central_difference(fn, tensors, h=1e-5):
    """Numerical gradient of the scalar ``fn()`` w.r.t. each tensor (perturbed in place)."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                plus = float(fn())
                flat[i] = orig - h
                minus = float(fn())
                flat[i] = orig
                gflat[i] = (plus - minus) / (2 * h)
            grads.append(g)
    return grads


def max_rel_err(a, b):
    scale = max(a.abs().max().item(), b.abs().max().item(), 1e-8)
    return (a - b).abs().max().item() / scale


def check_gradients(fn, tensors, tol=1e-4):
    """Assert autograd gradients of ``fn`` agree with central differences."""
    leaves = [t.requires_grad_(True) for t in tensors]
    analytic = torch.autograd.grad(fn(), leaves, allow_unused=True)
    for t in leaves:
        t.requires_grad_(False)
    numeric = central_difference(fn, leaves)
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        a = torch.zeros_like(n) if a is None else a
        err = max_rel_err(a, n)
        assert err < tol, f"tensor {i}: relative error {err:.2e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance reporting

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(n, passed, detail)`` records one PASS/FAIL line and returns ``passed``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        lines.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
