import math
import os
import time
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)

ARTIFACTS = Path(__file__).parent / "_artifacts"

# criterion number -> one-line verdict, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])


def bilinear_oracle(field, x, y):
    """Scalar 4-corner interpolation of a ``C x H x W`` field at one point, border clamped."""
    C, H, W = field.shape
    x = min(max(float(x), 0.0), W - 1)
    y = min(max(float(y), 0.0), H - 1)
    x0, y0 = min(int(math.floor(x)), max(W - 2, 0)), min(int(math.floor(y)), max(H - 2, 0))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    ax, ay = x - x0, y - y0
    out = []
    for c in range(C):
        f = field[c]
        out.append(
            float(f[y0, x0]) * (1 - ax) * (1 - ay)
            + float(f[y0, x1]) * ax * (1 - ay)
            + float(f[y1, x0]) * (1 - ax) * ay
            + float(f[y1, x1]) * ax * ay
        )
    return out


def numeric_grad(fn, x, eps=1e-3, index=None):
    """Central differences of scalar ``fn()`` w.r.t. tensor ``x`` (modified in place)."""
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    g = grad.view(-1)
    for i in (range(flat.numel()) if index is None else index):
        old = flat[i].item()
        flat[i] = old + eps
        fp = float(fn())
        flat[i] = old - eps
        fm = float(fn())
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(analytic, numeric):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    a, n = analytic.reshape(-1), numeric.reshape(-1)
    den = max(float(a.norm()), float(n.norm()), 1e-12)
    return float((a - n).norm()) / den


def grad_check(fn, inputs, eps=1e-3, max_entries=None, seed=0):
    """Max relative error between autograd and central differences over ``inputs``."""
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    gen = torch.Generator().manual_seed(seed)
    for t in inputs:
        index = None
        if max_entries is not None and t.numel() > max_entries:
            index = torch.randperm(t.numel(), generator=gen)[:max_entries].tolist()
        with torch.no_grad():
            num = numeric_grad(fn, t, eps, index)
        ana = t.grad.clone()
        if index is not None:
            ana, num = ana.view(-1)[index], num.view(-1)[index]
        worst = max(worst, rel_error(ana, num))
    return worst


@pytest.fixture(scope="session")
def trained():
    """The desk-scale toy model, trained once and cached under ``tests/_artifacts``.

    Set ``MEGAFLOW_RETRAIN=1`` to ignore the cache.
    """
    from megaflow.config import ModelConfig, TrainConfig
    from megaflow.train import Trainer, load_model, train

    ARTIFACTS.mkdir(exist_ok=True)
    path = ARTIFACTS / "toy_model.bin"
    if os.environ.get("MEGAFLOW_RETRAIN") == "1" or not path.exists():
        start = time.perf_counter()
        trainer = train(ModelConfig.toy(), TrainConfig(steps=2000, batch_size=8, seed=0), checkpoint_path=path)
        assert trainer.step == 2000, time.perf_counter() - start
    trainer = Trainer.from_checkpoint(path)
    return {"path": path, "model": load_model(path), "trainer": trainer}
