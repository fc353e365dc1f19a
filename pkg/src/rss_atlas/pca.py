"""Principal component analysis baseline compressor.

The symmetric eigenproblem is solved with an in-repo cyclic Jacobi sweep
rather than a LAPACK call, so fitted models are bit-reproducible across
BLAS builds. Component signs follow a fixed convention: the entry of
largest magnitude in each component is made positive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PcaModel:
    """Column mean, top-c orthonormal components (m x c), eigenvalues (desc)."""

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.components.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.components.shape[1]


def jacobi_eigh(A: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvalues ascending, like
    the LAPACK convention. Deterministic: fixed sweep order, no pivoting
    on magnitude.
    """
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DataError(f"matrix must be square, got {A.shape}")
    if not np.allclose(A, A.T, atol=1e-12 * max(1.0, float(np.abs(A).max()))):
        raise DataError("matrix is not symmetric")
    n = A.shape[0]
    V = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), V

    frob = float(np.sqrt(np.sum(A * A)))
    if frob == 0.0:
        return np.zeros(n), V
    threshold = tol * frob

    for _ in range(max_sweeps):
        off = float(np.sqrt(np.sum(np.tril(A, -1) ** 2) * 2.0))
        if off <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= threshold / (n * n):
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # Rotate rows/columns p and q of A and columns of V.
                col_p = A[:, p].copy()
                col_q = A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p = A[p, :].copy()
                row_q = A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = 0.0
                A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq

    w = A.diagonal().copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def fit(Z: np.ndarray, c: int) -> PcaModel:
    """Fit on the sample covariance (1/(n-1)) of the centered data."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2:
        raise DataError(f"Z must be a matrix, got shape {Z.shape}")
    n, m = Z.shape
    if n < 2:
        raise DataError("PCA needs at least 2 rows")
    if not 1 <= c <= m:
        raise ConfigError(f"latent dim {c} out of range [1, {m}]")
    mean = Z.mean(axis=0)
    centered = Z - mean
    cov = (centered.T @ centered) / (n - 1)
    w, V = jacobi_eigh(cov)
    order = np.argsort(-w, kind="stable")[:c]
    comps = V[:, order]
    vals = w[order]
    # Fixed sign: largest-magnitude entry of each component positive.
    for j in range(c):
        peak = np.argmax(np.abs(comps[:, j]))
        if comps[peak, j] < 0:
            comps[:, j] = -comps[:, j]
    return PcaModel(mean=mean, components=comps, eigenvalues=vals)


def transform(model: PcaModel, Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.shape[-1] != model.input_dim:
        raise DataError(f"expected {model.input_dim} columns, got {Z.shape[-1]}")
    return (Z - model.mean) @ model.components


def inverse_transform(model: PcaModel, L: np.ndarray) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    if L.shape[-1] != model.latent_dim:
        raise DataError(f"expected {model.latent_dim} columns, got {L.shape[-1]}")
    return L @ model.components.T + model.mean


def model_to_dict(model: PcaModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "mean": model.mean.tolist(),
        "components": model.components.tolist(),
        "eigenvalues": model.eigenvalues.tolist(),
    }


def model_from_dict(doc: dict) -> PcaModel:
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataError(f"unsupported PCA format_version {doc.get('format_version')!r}")
    return PcaModel(
        mean=np.array(doc["mean"], dtype=float),
        components=np.array(doc["components"], dtype=float),
        eigenvalues=np.array(doc["eigenvalues"], dtype=float),
    )


def save_model(model: PcaModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> PcaModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
