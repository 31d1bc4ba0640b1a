"""Real spherical-harmonics basis up to degree 3 (3DGS sign convention)."""

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sh_basis(dirs):
    """Basis values Y_k(d) for unit directions, shape (N, 16)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty((len(d), 16))
    out[:, 0] = C0
    out[:, 1] = -C1 * y
    out[:, 2] = C1 * z
    out[:, 3] = -C1 * x
    out[:, 4] = C2[0] * x * y
    out[:, 5] = C2[1] * y * z
    out[:, 6] = C2[2] * (2 * zz - xx - yy)
    out[:, 7] = C2[3] * x * z
    out[:, 8] = C2[4] * (xx - yy)
    out[:, 9] = C3[0] * y * (3 * xx - yy)
    out[:, 10] = C3[1] * x * y * z
    out[:, 11] = C3[2] * y * (4 * zz - xx - yy)
    out[:, 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[:, 13] = C3[4] * x * (4 * zz - xx - yy)
    out[:, 14] = C3[5] * z * (xx - yy)
    out[:, 15] = C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(dirs):
    """Partial derivatives dY_k/d(x, y, z), shape (N, 16, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    g = np.zeros((len(d), 16, 3))
    g[:, 1, 1] = -C1
    g[:, 2, 2] = C1
    g[:, 3, 0] = -C1
    g[:, 4, 0], g[:, 4, 1] = C2[0] * y, C2[0] * x
    g[:, 5, 1], g[:, 5, 2] = C2[1] * z, C2[1] * y
    g[:, 6, 0], g[:, 6, 1], g[:, 6, 2] = -2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z
    g[:, 7, 0], g[:, 7, 2] = C2[3] * z, C2[3] * x
    g[:, 8, 0], g[:, 8, 1] = 2 * C2[4] * x, -2 * C2[4] * y
    g[:, 9, 0], g[:, 9, 1] = C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy)
    g[:, 10, 0], g[:, 10, 1], g[:, 10, 2] = C3[1] * y * z, C3[1] * x * z, C3[1] * x * y
    g[:, 11, 0] = C3[2] * (-2 * x * y)
    g[:, 11, 1] = C3[2] * (4 * zz - xx - 3 * yy)
    g[:, 11, 2] = C3[2] * 8 * y * z
    g[:, 12, 0] = C3[3] * (-6 * x * z)
    g[:, 12, 1] = C3[3] * (-6 * y * z)
    g[:, 12, 2] = C3[3] * (6 * zz - 3 * xx - 3 * yy)
    g[:, 13, 0] = C3[4] * (4 * zz - 3 * xx - yy)
    g[:, 13, 1] = C3[4] * (-2 * x * y)
    g[:, 13, 2] = C3[4] * 8 * x * z
    g[:, 14, 0], g[:, 14, 1], g[:, 14, 2] = C3[5] * 2 * x * z, -C3[5] * 2 * y * z, C3[5] * (xx - yy)
    g[:, 15, 0], g[:, 15, 1] = C3[6] * (3 * xx - 3 * yy), C3[6] * (-6 * x * y)
    return g


def eval_sh(sh, dirs):
    """Raw (unclamped, un-offset) SH color: sum_k Y_k(d) sh_k, shape (N, 3)."""
    return np.einsum("nk,nkc->nc", sh_basis(dirs), sh)
