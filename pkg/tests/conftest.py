import logging

import numpy as np
import pytest
import torch
from shapely.geometry import box

from mtc_regions.tessellation import RegionAdjacency, TargetTessellation


def square_grid_tessellation(n_rows: int, n_cols: int, size: float = 100.0) -> TargetTessellation:
    """One square region per grid position, ids ``r{row}_{col}``."""
    return TargetTessellation.from_polygons(
        (f"r{i}_{j}", box(j * size, i * size, (j + 1) * size, (i + 1) * size))
        for i in range(n_rows)
        for j in range(n_cols)
    )


def chain(*names: str) -> RegionAdjacency:
    return RegionAdjacency.from_edges(names, zip(names, names[1:]))


def jitter(params, seed, scale=0.05):
    # zero-initialised biases put ReLUs exactly on their kink; move to a generic point
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in params:
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


def finite_difference_check(loss_fn, params, n_coords, seed, eps=1e-6, floor=1e-7):
    """Max relative error between autograd and central differences.

    Samples random coordinates until ``n_coords`` of them carry a gradient
    above ``floor``; returns (worst relative error, coordinates compared).
    """
    grads = torch.autograd.grad(loss_fn(), params)
    sizes = np.array([p.numel() for p in params])
    r = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    for _ in range(20 * n_coords):
        if checked == n_coords:
            break
        pi = r.choice(len(params), p=sizes / sizes.sum())
        p, g = params[pi], grads[pi]
        idx = int(r.integers(p.numel()))
        with torch.no_grad():
            orig = p.view(-1)[idx].item()
            p.view(-1)[idx] = orig + eps
            up = loss_fn().item()
            p.view(-1)[idx] = orig - eps
            down = loss_fn().item()
            p.view(-1)[idx] = orig
        numeric = (up - down) / (2 * eps)
        analytic = g.view(-1)[idx].item()
        scale = max(abs(numeric), abs(analytic))
        if scale > floor:
            worst = max(worst, abs(numeric - analytic) / scale)
            checked += 1
    return worst, checked


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
