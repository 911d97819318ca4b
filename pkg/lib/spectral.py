import logging
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from optypes.match_types import (
    DescriptorConfig,
    DescriptorField,
    DescriptorKind,
    EigenBasis,
    LaplacianPair,
    Shape,
    ShapeKind,
)

logger = logging.getLogger(__name__)

# below this size the dense generalized solver is both exact and fast
DENSE_SOLVER_LIMIT = 500
SHIFT = -1e-8


class SpectralError(Exception):
    """Base exception for Laplacian and descriptor errors"""
    pass


class EigenSolverError(SpectralError):
    """Raised when the eigensolver fails to converge"""
    pass


class DescriptorError(SpectralError):
    """Raised when descriptor parameters are invalid"""
    pass


def _cotangent_weights(shape: Shape) -> sp.csr_matrix:
    v, f = shape.vertices, shape.faces
    n = shape.n_vertices
    rows, cols, vals = [], [], []
    for corner in range(3):
        i = f[:, corner]
        j = f[:, (corner + 1) % 3]
        k = f[:, (corner + 2) % 3]
        u = v[j] - v[i]
        w = v[k] - v[i]
        cot = np.einsum("ij,ij->i", u, w) / np.linalg.norm(np.cross(u, w), axis=1)
        # the angle at i weighs the opposite edge (j, k)
        rows += [j, k]
        cols += [k, j]
        vals += [0.5 * cot, 0.5 * cot]
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def _gaussian_weights(shape: Shape) -> sp.csr_matrix:
    n = shape.n_vertices
    if (shape.degree == 0).any():
        raise SpectralError(
            f"Point cloud has {int((shape.degree == 0).sum())} isolated vertices"
        )
    lengths = shape.edge_lengths
    h = float(lengths.mean())
    if h <= 0:
        raise SpectralError("Point cloud has zero mean kNN edge length")
    w = np.exp(-(lengths ** 2) / (2.0 * h ** 2))
    a, b = shape.edges[:, 0], shape.edges[:, 1]
    return sp.csr_matrix(
        (np.concatenate([w, w]), (np.concatenate([a, b]), np.concatenate([b, a]))), shape=(n, n)
    )


def build_laplacian(shape: Shape) -> LaplacianPair:
    """Stiffness (degree minus weights) and lumped mass for either representation."""
    if shape.kind is ShapeKind.MESH:
        weights = _cotangent_weights(shape)
    else:
        weights = _gaussian_weights(shape)
    degree = np.asarray(weights.sum(axis=1)).ravel()
    stiffness = (sp.diags(degree) - weights).tocsr()
    mass = sp.diags(shape.vertex_area).todia()
    return LaplacianPair(stiffness=stiffness, mass=mass)


def _mass_orthonormalize(vecs: np.ndarray, mass: sp.spmatrix) -> np.ndarray:
    gram = vecs.T @ (mass @ vecs)
    chol = la.cholesky(gram, lower=True)
    return la.solve_triangular(chol, vecs.T, lower=True).T


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    scale = np.abs(vecs).max(axis=0)
    significant = np.abs(vecs) > 1e-12 * scale
    first = np.argmax(significant, axis=0)
    signs = np.sign(vecs[first, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def residual_norms(lap: LaplacianPair, basis: EigenBasis) -> np.ndarray:
    phi, lam = basis.eigenvectors, basis.eigenvalues
    residual = lap.stiffness @ phi - (lap.mass @ phi) * lam
    return np.linalg.norm(residual, axis=0) / np.linalg.norm(phi, axis=0)


def eigendecompose(lap: LaplacianPair, m: int) -> EigenBasis:
    """First m generalized eigenpairs of stiffness φ = λ mass φ, ascending.

    Eigenvectors are mass-orthonormal with the first significant entry
    positive.

    Raises:
        EigenSolverError: If ARPACK does not converge
    """
    n = lap.stiffness.shape[0]
    if not 1 <= m <= n:
        raise SpectralError(f"Requested {m} eigenpairs from a {n}x{n} problem")

    if n <= DENSE_SOLVER_LIMIT or m >= n - 1:
        vals, vecs = la.eigh(
            lap.stiffness.toarray(), lap.mass.toarray(), subset_by_index=[0, m - 1]
        )
    else:
        v0 = np.random.default_rng(0).standard_normal(n)
        try:
            vals, vecs = eigsh(
                lap.stiffness.tocsc(), k=m, M=lap.mass.tocsc(), sigma=SHIFT, which="LM", v0=v0
            )
        except ArpackNoConvergence as e:
            partial = EigenBasis(eigenvalues=e.eigenvalues, eigenvectors=e.eigenvectors)
            norms = residual_norms(lap, partial) if len(e.eigenvalues) else np.array([])
            logger.error(
                f"Eigensolver did not converge: {len(e.eigenvalues)}/{m} pairs, "
                f"residuals {np.array2string(norms, precision=2)}"
            )
            raise EigenSolverError(
                f"Eigensolver converged on {len(e.eigenvalues)} of {m} pairs; "
                f"max residual {norms.max() if norms.size else float('nan'):.3e}"
            ) from e

    order = np.argsort(vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    vecs = _fix_signs(_mass_orthonormalize(vecs, lap.mass))
    basis = EigenBasis(eigenvalues=vals, eigenvectors=vecs)
    logger.debug(
        f"Eigendecomposition: {m} pairs, lambda in [{vals[0]:.3e}, {vals[-1]:.3e}], "
        f"max residual {residual_norms(lap, basis).max():.2e}"
    )
    return basis


def compute_hks(basis: EigenBasis, times: Sequence[float]) -> DescriptorField:
    """HKS_t(x) = sum_l exp(-λ_l t) φ_l(x)^2 for each t."""
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    if times.size == 0:
        raise DescriptorError("At least one time step is required")
    if (times <= 0).any() or (np.diff(times) <= 0).any():
        raise DescriptorError("Time steps must be positive and strictly ascending")
    decay = np.exp(-np.outer(basis.eigenvalues, times))
    values = (basis.eigenvectors ** 2) @ decay
    if not (values > 0).all():
        raise DescriptorError("HKS produced non-positive values")
    return DescriptorField(values=values, times=times)


def eigenpair_count(n_vertices: int, config: DescriptorConfig) -> int:
    return min(n_vertices - 1, config.max_eigenpairs)


def compute_descriptors(
    shape: Shape, config: Optional[DescriptorConfig] = None
) -> DescriptorField:
    """Laplacian, truncated eigenbasis and multi-time HKS for one shape."""
    config = config or DescriptorConfig()
    if config.kind is not DescriptorKind.HKS:
        raise DescriptorError(f"Descriptor '{config.kind.value}' is not supported")
    lap = build_laplacian(shape)
    basis = eigendecompose(lap, eigenpair_count(shape.n_vertices, config))
    field = compute_hks(basis, config.times())
    logger.info(
        f"HKS on {shape.n_vertices} vertices: {field.dimension} time steps, "
        f"{basis.size} eigenpairs"
    )
    return field
