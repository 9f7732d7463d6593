"""6D Gaussian parameterization.

Every splat is stored through raw (pre-activation) parameters:

    mu_p        (3,)      world position, identity activation
    mu_d        (3,)      direction mean, identity (or unit-normalized) activation
    raw_L       (21,)     packed lower-triangular Cholesky factor of the 6x6 covariance
    raw_alpha   ()        opacity logit
    sh          (3, 16)   SH coefficients, channel-major, degree <= 3
    raw_lambda  ()        logit of the view-dependency strength lambda_opa

``raw_L`` packs the 6 diagonal entries first (exp activation) followed by the
15 strictly-lower entries in row-major order (tanh activation).  The flat
parameter vector of a splat is ``mu_p, mu_d, L-diag, L-offdiag, alpha, sh,
lambda`` (77 values).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

N_SH = 16
N_RAW_L = 21
N_PARAMS = 3 + 3 + N_RAW_L + 1 + 3 * N_SH + 1

TRIL_ROWS, TRIL_COLS = np.tril_indices(6, -1)
DIAG = np.arange(6)

# slices into the flat 77-vector
PARAM_LAYOUT = {
    "mu_p": slice(0, 3),
    "mu_d": slice(3, 6),
    "raw_L": slice(6, 27),
    "raw_alpha": slice(27, 28),
    "sh": slice(28, 76),
    "raw_lambda": slice(76, 77),
}


class ParameterDomainError(ValueError):
    """Raw parameters outside the domain an activation accepts."""


class NumericDegeneracyError(ArithmeticError):
    """A matrix that must be invertible is not, even after jitter."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"{message} (gaussian {index})")
        self.index = index


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def raw_lambda_for(lambda_opa: float) -> float:
    """Stored logit for a lambda_opa value; 0 and 1 map to finite stand-ins."""
    return float(logit(np.clip(lambda_opa, 1e-6, 1 - 1e-6)))


def activate_cholesky(raw_L) -> np.ndarray:
    """Map packed raw factors ``(..., 21)`` to lower-triangular ``(..., 6, 6)``."""
    raw_L = np.asarray(raw_L, dtype=np.float64)
    if raw_L.shape[-1] != N_RAW_L:
        raise ParameterDomainError(f"expected {N_RAW_L} packed entries, got {raw_L.shape[-1]}")
    if not np.all(np.isfinite(raw_L)):
        raise ParameterDomainError("non-finite Cholesky parameters")
    L = np.zeros(raw_L.shape[:-1] + (6, 6))
    L[..., DIAG, DIAG] = np.exp(raw_L[..., :6])
    L[..., TRIL_ROWS, TRIL_COLS] = np.tanh(raw_L[..., 6:])
    return L


def pack_cholesky(L) -> np.ndarray:
    """Inverse of :func:`activate_cholesky`.

    Off-diagonal entries must lie strictly inside (-1, 1).
    """
    L = np.asarray(L, dtype=np.float64)
    off = L[..., TRIL_ROWS, TRIL_COLS]
    diag = L[..., DIAG, DIAG]
    if np.any(diag <= 0) or np.any(np.abs(off) >= 1):
        raise ParameterDomainError("factor not reachable by the activation")
    return np.concatenate([np.log(diag), np.arctanh(off)], axis=-1)


def covariance(L) -> np.ndarray:
    """Sigma = L L^T, batched over leading axes."""
    L = np.asarray(L, dtype=np.float64)
    return L @ np.swapaxes(L, -1, -2)


def direction_means(mu_d, normalize: bool = False) -> np.ndarray:
    mu_d = np.asarray(mu_d, dtype=np.float64)
    if not normalize:
        return mu_d
    return mu_d / np.linalg.norm(mu_d, axis=-1, keepdims=True)


@dataclass
class Gaussian6D:
    """A single splat in raw parameter space."""

    mu_p: np.ndarray
    mu_d: np.ndarray
    raw_L: np.ndarray
    raw_alpha: float
    sh: np.ndarray
    raw_lambda: float

    @property
    def L(self) -> np.ndarray:
        return activate_cholesky(self.raw_L)

    @property
    def sigma(self) -> np.ndarray:
        return covariance(self.L)

    @property
    def alpha(self) -> float:
        return float(sigmoid(self.raw_alpha))

    @property
    def lambda_opa(self) -> float:
        return float(sigmoid(self.raw_lambda))

    def pack(self) -> np.ndarray:
        return np.concatenate([
            self.mu_p, self.mu_d, self.raw_L, [self.raw_alpha],
            np.asarray(self.sh).reshape(-1), [self.raw_lambda],
        ]).astype(np.float64)

    @classmethod
    def unpack(cls, vec) -> "Gaussian6D":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (N_PARAMS,):
            raise ParameterDomainError(f"expected {N_PARAMS} parameters, got {vec.shape}")
        lay = PARAM_LAYOUT
        return cls(
            mu_p=vec[lay["mu_p"]].copy(),
            mu_d=vec[lay["mu_d"]].copy(),
            raw_L=vec[lay["raw_L"]].copy(),
            raw_alpha=float(vec[lay["raw_alpha"]][0]),
            sh=vec[lay["sh"]].reshape(3, N_SH).copy(),
            raw_lambda=float(vec[lay["raw_lambda"]][0]),
        )


def _default_bbox() -> np.ndarray:
    return np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


@dataclass
class Scene:
    """A collection of 6D Gaussians in structure-of-arrays form."""

    mu_p: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    mu_d: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    raw_L: np.ndarray = field(default_factory=lambda: np.zeros((0, N_RAW_L)))
    raw_alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sh: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, N_SH)))
    raw_lambda: np.ndarray = field(default_factory=lambda: np.zeros(0))
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bbox: np.ndarray = field(default_factory=_default_bbox)

    GROUPS = ("mu_p", "mu_d", "raw_L", "raw_alpha", "sh", "raw_lambda")

    def __post_init__(self):
        for name in self.GROUPS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.background = np.asarray(self.background, dtype=np.float64)
        self.bbox = np.asarray(self.bbox, dtype=np.float64)
        n = len(self.mu_p)
        shapes = {
            "mu_p": (n, 3), "mu_d": (n, 3), "raw_L": (n, N_RAW_L),
            "raw_alpha": (n,), "sh": (n, 3, N_SH), "raw_lambda": (n,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ParameterDomainError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    def __len__(self) -> int:
        return len(self.mu_p)

    def __getitem__(self, i: int) -> Gaussian6D:
        return Gaussian6D(
            mu_p=self.mu_p[i].copy(), mu_d=self.mu_d[i].copy(), raw_L=self.raw_L[i].copy(),
            raw_alpha=float(self.raw_alpha[i]), sh=self.sh[i].copy(),
            raw_lambda=float(self.raw_lambda[i]),
        )

    @classmethod
    def from_gaussians(cls, gaussians, background=(0.0, 0.0, 0.0), bbox=None) -> "Scene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls(background=np.asarray(background, float),
                       bbox=_default_bbox() if bbox is None else bbox)
        return cls(
            mu_p=np.stack([g.mu_p for g in gaussians]),
            mu_d=np.stack([g.mu_d for g in gaussians]),
            raw_L=np.stack([g.raw_L for g in gaussians]),
            raw_alpha=np.array([g.raw_alpha for g in gaussians]),
            sh=np.stack([np.asarray(g.sh).reshape(3, N_SH) for g in gaussians]),
            raw_lambda=np.array([g.raw_lambda for g in gaussians]),
            background=np.asarray(background, float),
            bbox=_default_bbox() if bbox is None else bbox,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.GROUPS}

    def copy(self) -> "Scene":
        return Scene(**{k: v.copy() for k, v in self.params().items()},
                     background=self.background.copy(), bbox=self.bbox.copy())

    def take(self, index) -> "Scene":
        """Subset by boolean mask or integer index array."""
        return Scene(**{k: v[index].copy() for k, v in self.params().items()},
                     background=self.background.copy(), bbox=self.bbox.copy())

    def extend(self, other: "Scene") -> "Scene":
        merged = {k: np.concatenate([v, getattr(other, k)]) for k, v in self.params().items()}
        return Scene(**merged, background=self.background.copy(), bbox=self.bbox.copy())

    def pack(self) -> np.ndarray:
        """Flat ``(N, 77)`` array in the documented parameter order."""
        n = len(self)
        return np.concatenate([
            self.mu_p, self.mu_d, self.raw_L, self.raw_alpha[:, None],
            self.sh.reshape(n, 3 * N_SH), self.raw_lambda[:, None],
        ], axis=1)

    @classmethod
    def unpack(cls, packed, background=(0.0, 0.0, 0.0), bbox=None) -> "Scene":
        packed = np.asarray(packed, dtype=np.float64).reshape(-1, N_PARAMS)
        lay = PARAM_LAYOUT
        return cls(
            mu_p=packed[:, lay["mu_p"]], mu_d=packed[:, lay["mu_d"]],
            raw_L=packed[:, lay["raw_L"]], raw_alpha=packed[:, lay["raw_alpha"]][:, 0],
            sh=packed[:, lay["sh"]].reshape(-1, 3, N_SH),
            raw_lambda=packed[:, lay["raw_lambda"]][:, 0],
            background=np.asarray(background, float),
            bbox=_default_bbox() if bbox is None else bbox,
        )

    def validate(self) -> list[str]:
        """Return a list of violated invariants (empty when the scene is valid)."""
        problems = []
        for name, arr in self.params().items():
            if not np.all(np.isfinite(arr)):
                problems.append(f"non-finite values in {name}")
        if problems:
            return problems
        if np.any(self.background < 0) or np.any(self.background > 1):
            problems.append("background outside [0, 1]")
        lo, hi = self.bbox
        if np.any(hi < lo):
            problems.append("bbox max below min")
        if len(self):
            center, half = (lo + hi) / 2, (hi - lo) / 2
            outside = np.any(np.abs(self.mu_p - center) > 2 * half + 1e-12, axis=1)
            if outside.any():
                problems.append(f"{int(outside.sum())} positions outside the 2x expanded bbox")
            sig = covariance(activate_cholesky(self.raw_L))
            if np.any(np.linalg.eigvalsh(sig)[:, 0] <= 0):
                problems.append("covariance not positive definite")
        return problems
