import numpy as np
import pytest
import torch

from toothseg.mesh import TriangleMesh

torch.set_num_threads(1)


def random_mesh(rng: np.random.Generator, n_vertices: int = 40, n_faces: int = 100) -> TriangleMesh:
    """Random triangle soup over shared vertices; no repeated indices within a face."""
    verts = rng.normal(size=(n_vertices, 3))
    faces = np.stack([rng.choice(n_vertices, 3, replace=False) for _ in range(n_faces)])
    return TriangleMesh(verts, faces)


def grid_mesh(nx: int = 6, ny: int = 5, z=None) -> TriangleMesh:
    """Regular CCW-triangulated grid in the z=0 plane (or a heightfield if z is given)."""
    xs, ys = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float), indexing="ij")
    zz = np.zeros_like(xs) if z is None else z(xs, ys)
    verts = np.stack([xs.ravel(), ys.ravel(), zz.ravel()], 1)
    idx = np.arange(nx * ny).reshape(nx, ny)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriangleMesh(verts, faces)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_grad_error(fn, inputs, eps: float = 1e-6) -> float:
    """Max relative error between autograd and central differences of sum(fn * probe)."""
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    probe = torch.randn(out.shape, generator=torch.Generator().manual_seed(7), dtype=torch.float64)
    (out * probe).sum().backward()
    worst = 0.0
    for x in inputs:
        num = torch.zeros_like(x)
        flat = x.detach().view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = (fn(*inputs) * probe).sum().item()
            flat[i] = orig - eps
            lo = (fn(*inputs) * probe).sum().item()
            flat[i] = orig
            num.view(-1)[i] = (hi - lo) / (2 * eps)
        err = (x.grad - num).norm() / max(num.norm().item(), x.grad.norm().item(), 1e-12)
        worst = max(worst, float(err))
    return worst


def jaw_cloud(seed: int = 0, cells: int = 256, mode: str = "BVN24", n_teeth: int = 14, source_cells: int | None = None):
    """A synthetic lower jaw, mapped to the 8 classes and preprocessed to about `cells` cells."""
    from toothseg.io import map_labels
    from toothseg.preprocess import DecimationConfig, preprocess_scan
    from toothseg.synthetic import generate_synthetic_jaw

    m = generate_synthetic_jaw(seed, n_teeth, source_cells or 4 * cells)
    m.vertex_labels = map_labels(m.vertex_labels)
    _, cloud, _ = preprocess_scan(m, mode, DecimationConfig(target_cells=cells))
    return cloud


def exact_size(cloud, n: int):
    """Keep the first n cells so batched clouds share a cell count."""
    return cloud.replace(features=cloud.features[:n], barycenters=cloud.barycenters[:n],
                         labels=None if cloud.labels is None else cloud.labels[:n],
                         degenerate=None if cloud.degenerate is None else cloud.degenerate[:n])


# --- acceptance reporting ----------------------------------------------------------


class CriterionChecks:
    def __init__(self):
        self.failures = []
        self.notes = []

    def check(self, ok, msg):
        if not ok:
            self.failures.append(msg)
        return ok

    def note(self, msg):
        self.notes.append(msg)


def pytest_configure(config):
    config.criteria_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "criteria_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Context manager: `with criterion(n, budget_s) as c: c.check(...)` records one PASS/FAIL line."""
    import contextlib
    import sys
    import time

    @contextlib.contextmanager
    def run(number, budget_s=None):
        c = CriterionChecks()
        t0 = time.perf_counter()
        try:
            yield c
        except Exception as exc:
            c.failures.append(f"{type(exc).__name__}: {exc}")
        elapsed = time.perf_counter() - t0
        if budget_s is not None:
            c.check(elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s")
        status = "PASS" if not c.failures else "FAIL"
        detail = "; ".join(c.notes + c.failures)
        line = f"criterion {number}: {status} ({elapsed:.1f}s) {detail}".rstrip()
        request.config.criteria_lines.append(line)
        print(line, file=sys.__stdout__, flush=True)
        assert not c.failures, line

    return run
