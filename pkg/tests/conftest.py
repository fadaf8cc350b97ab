import numpy as np
import pytest

from garmentsplat.mesh import TriangleMesh
from garmentsplat.scenes import grid_patch


def random_patch(seed: int, n: int = 4, size: float = 0.2, noise: float = 0.02) -> TriangleMesh:
    """Grid patch with jittered rest pose (so rest angles are non-zero)."""
    rng = np.random.default_rng(seed)
    base = grid_patch(n, size)
    rest = base.vertices + noise * rng.standard_normal(base.vertices.shape)
    return TriangleMesh(rest, base.faces, base.uvs)


def random_rigid(seed: int):
    from scipy.spatial.transform import Rotation
    rng = np.random.default_rng(seed)
    return Rotation.random(random_state=seed).as_matrix(), rng.normal(size=3)


def central_fd(f, x, h):
    """Full central-difference gradient of scalar ``f`` at ``x``."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def jump_safe_fd(f, x, steps=(1e-6, 1e-7, 1e-8), rtol=1e-3):
    """Central differences that step around jumps in ``f``.

    The rasterizer drops fragments with alpha below 1/255, so the loss has
    small jumps where a pixel crosses that cutoff. For each coordinate the
    largest step whose two one-sided slopes agree is used. Returns the
    gradient and the number of coordinates that needed a smaller step.
    """
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    f0 = f(x)
    retried = 0
    for i in range(flat.size):
        old = flat[i]
        for k, h in enumerate(steps):
            flat[i] = old + h
            fp = f(x)
            flat[i] = old - h
            fm = f(x)
            flat[i] = old
            sp, sm = (fp - f0) / h, (f0 - fm) / h
            if abs(sp - sm) <= rtol * max(abs(sp), abs(sm)) + 1e-4:
                break
        retried += k > 0
        gf[i] = (fp - fm) / (2 * h)
    return g, retried


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
