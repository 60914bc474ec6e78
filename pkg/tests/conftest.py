import numpy as np
import pytest
import torch


def central_difference_error(fn, params, eps=1e-6):
    """Max relative error between autograd and central finite differences of ``fn()``.

    ``fn`` returns a scalar tensor built from ``params`` (float64 leaves).
    """
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            with torch.no_grad():
                up = fn().item()
            flat[i] = old - eps
            with torch.no_grad():
                down = fn().item()
            flat[i] = old
            numeric[i] = (up - down) / (2 * eps)
        scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        worst = max(worst, (analytic - numeric).norm().item() / scale)
    return worst


@pytest.fixture
def fd_error():
    return central_difference_error


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY_ESTIMATOR = dict(embed_dim=32, encoder_depth=1, encoder_heads=2, decoder_depth=1, decoder_heads=2, batch_size=4)


@pytest.fixture(scope="session")
def phantom_arrays():
    from pgsam.data import generate_phantoms, site_config, stack_samples

    batch = stack_samples(generate_phantoms(site_config("site1", 12, seed=3)))
    return batch.channels, batch.masks, batch.reports


@pytest.fixture
def tiny_params():
    return dict(TINY_ESTIMATOR)


_CRITERIA = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail)``."""

    def record(number, passed, detail):
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} {detail}"
        _CRITERIA.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
