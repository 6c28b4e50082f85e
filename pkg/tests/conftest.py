import numpy as np
import pytest
from scipy.interpolate import RegularGridInterpolator

from factorfield.tensor_field import VM_LAYOUT, VEC_NAMES, MAT_NAMES


def dense_from_factors(field):
    """Explicit-loop reconstruction of a CP or VM field (independent of the library kernels)."""
    A = {k: np.asarray(v, dtype=np.float64) for k, v in field.arrays.items()}
    nx, ny, nz = field.geometry.resolution
    out = np.zeros((nx, ny, nz))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                idx = (i, j, k)
                s = 0.0
                if field.mode == "CP":
                    for r in range(field.ranks[0]):
                        s += A["vec_x"][r, i] * A["vec_y"][r, j] * A["vec_z"][r, k]
                else:
                    for (vax, (a, b)), vn, mn, R in zip(VM_LAYOUT, VEC_NAMES, MAT_NAMES, field.ranks):
                        for r in range(R):
                            s += A[vn][r, idx[vax]] * A[mn][r, idx[a], idx[b]]
                out[i, j, k] = s
    return out


def dense_components(field):
    """(nx, ny, nz, C) per-component dense tensors in the stacking order X block, Y block, Z block."""
    A = {k: np.asarray(v, dtype=np.float64) for k, v in field.arrays.items()}
    comps = []
    if field.mode == "CP":
        for r in range(field.ranks[0]):
            comps.append(np.einsum("i,j,k->ijk", A["vec_x"][r], A["vec_y"][r], A["vec_z"][r]))
    else:
        specs = ["i,jk->ijk", "j,ik->ijk", "k,ij->ijk"]
        for spec, vn, mn, R in zip(specs, VEC_NAMES, MAT_NAMES, field.ranks):
            for r in range(R):
                comps.append(np.einsum(spec, A[vn][r], A[mn][r]))
    return np.stack(comps, axis=-1)


def interp_dense(dense, geometry, points):
    """scipy trilinear interpolation of node values over the align-corners lattice."""
    axes = [np.linspace(geometry.bbox_min[a], geometry.bbox_max[a], geometry.resolution[a]) for a in range(3)]
    return RegularGridInterpolator(axes, dense, method="linear")(points)


def random_points(geometry, n, rng):
    return rng.uniform(geometry.lo, geometry.hi, (n, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
