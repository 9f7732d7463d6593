"""Real spherical harmonics up to degree 3 and view-dependent color.

Basis ordering is degree-major, ``m`` ascending within a degree.  Signs carry
no Condon-Shortley phase, so every degree-1 function is a positive multiple
of a Cartesian coordinate.
"""

from __future__ import annotations

import numpy as np

from .gaussians import sigmoid

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
      1.0925484305920792, 0.5462742152960396)
C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
      0.3731763325901154, 0.4570457994644658, 1.445305721320277,
      0.5900435899266435)

#: degree of each of the 16 basis functions
BAND = np.array([0, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3, 3, 3])


def _unit(d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def eval_sh_basis(d) -> np.ndarray:
    """Evaluate the 16 basis functions at directions ``(..., 3)``.

    Non-unit inputs are normalized first.
    """
    d = _unit(d)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty(d.shape[:-1] + (16,))
    out[..., 0] = C0
    out[..., 1] = C1 * y
    out[..., 2] = C1 * z
    out[..., 3] = C1 * x
    out[..., 4] = C2[0] * x * y
    out[..., 5] = C2[1] * y * z
    out[..., 6] = C2[2] * (2 * zz - xx - yy)
    out[..., 7] = C2[3] * x * z
    out[..., 8] = C2[4] * (xx - yy)
    out[..., 9] = C3[0] * y * (3 * xx - yy)
    out[..., 10] = C3[1] * x * y * z
    out[..., 11] = C3[2] * y * (4 * zz - xx - yy)
    out[..., 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[..., 13] = C3[4] * x * (4 * zz - xx - yy)
    out[..., 14] = C3[5] * z * (xx - yy)
    out[..., 15] = C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_jacobian(d) -> np.ndarray:
    """Cartesian gradient ``(..., 16, 3)`` of the basis polynomials at ``d``.

    The polynomials are differentiated as written (no normalization), so
    callers chaining through ``d = v / |v|`` must project out the radial part.
    """
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    zero = np.zeros_like(x)
    rows = [
        (zero, zero, zero),
        (zero, C1 + zero, zero),
        (zero, zero, C1 + zero),
        (C1 + zero, zero, zero),
        (C2[0] * y, C2[0] * x, zero),
        (zero, C2[1] * z, C2[1] * y),
        (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
        (C2[3] * z, zero, C2[3] * x),
        (2 * C2[4] * x, -2 * C2[4] * y, zero),
        (6 * C3[0] * x * y, C3[0] * (3 * xx - 3 * yy), zero),
        (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
        (-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy), 8 * C3[2] * y * z),
        (-6 * C3[3] * x * z, -6 * C3[3] * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
        (C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y, 8 * C3[4] * x * z),
        (2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)),
        (C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, zero),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_color(beta, d) -> np.ndarray:
    """Color ``sigmoid(beta . Y(d))``.

    ``beta`` is ``(..., 3, 16)`` (channel-major) and ``d`` is ``(..., 3)``;
    returns ``(..., 3)``.
    """
    beta = np.asarray(beta, dtype=np.float64)
    basis = eval_sh_basis(d)
    return sigmoid(np.einsum("...ck,...k->...c", beta, basis))


def rgb_to_dc(rgb) -> np.ndarray:
    """Band-0 coefficient producing a constant color ``rgb`` under :func:`eval_color`."""
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 1e-6, 1 - 1e-6)
    return (np.log(rgb) - np.log1p(-rgb)) / C0
