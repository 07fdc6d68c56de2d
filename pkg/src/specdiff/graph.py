"""Sensor graphs, normalized Laplacians, and the graph Fourier transform.

A sensor network is held as an undirected weighted :class:`StgGraph`.  Its
normalized Laplacian ``L = I - D^{-1/2} A D^{-1/2}`` is decomposed into an
orthonormal eigenbasis ``U`` (a :class:`FourierBasis`), which transforms
node-wise signals into the spectral domain via ``x_tilde = U.T @ x`` and
reconstructs them losslessly via ``x = U @ x_tilde``.

All functions here are pure and deterministic; a fixed eigenvector ordering
and sign convention makes repeated decompositions bit-identical.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, InputError, NumericError, ShapeError

Edge = tuple[int, int, float]


@dataclass
class StgGraph:
    """Undirected weighted sensor graph.

    Attributes
    ----------
    num_nodes:
        Number of sensors N.
    edges:
        Canonical undirected edge list ``(i, j, weight)`` with ``i < j`` and
        ``weight > 0``, sorted by ``(i, j)``.
    adjacency:
        N x N symmetric non-negative matrix with zero diagonal.
    degree:
        Row sums of ``adjacency``.
    """

    num_nodes: int
    edges: list[Edge]
    adjacency: np.ndarray
    degree: np.ndarray

    def __post_init__(self) -> None:
        a = self.adjacency
        if a.shape != (self.num_nodes, self.num_nodes):
            raise ShapeError(f"adjacency shape {a.shape} does not match N={self.num_nodes}")
        if not np.array_equal(a, a.T):
            raise InputError("adjacency must be exactly symmetric")
        if np.any(np.diag(a) != 0.0):
            raise InputError("adjacency diagonal must be zero")
        if np.any(a < 0.0) or not np.all(np.isfinite(a)):
            raise InputError("adjacency entries must be finite and non-negative")
        if not np.allclose(self.degree, a.sum(axis=1), rtol=0.0, atol=0.0):
            raise InputError("degree vector must equal adjacency row sums")

    @property
    def num_edges(self) -> int:
        return len(self.edges)


@dataclass
class FourierBasis:
    """Spectral operator of a normalized graph Laplacian.

    ``eigvecs`` columns are eigenvectors in ascending eigenvalue order with a
    deterministic sign (the largest-magnitude component of each column is
    positive, ties broken by lowest index).  ``scaled_eigvals`` rescales the
    spectrum onto [-1, 1] for Chebyshev filtering.
    """

    eigvecs: np.ndarray
    eigvals: np.ndarray
    lambda_max: float
    scaled_eigvals: np.ndarray
    _ones_spectrum: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def num_nodes(self) -> int:
        return self.eigvecs.shape[0]

    def ones_spectrum(self) -> np.ndarray:
        """``U.T @ 1``, cached; used to lift node-constant features."""
        if self._ones_spectrum is None:
            self._ones_spectrum = self.eigvecs.T @ np.ones(self.num_nodes)
        return self._ones_spectrum


def build_graph(
    edges: list[Edge],
    num_nodes: int,
    symmetrize: bool = True,
    threshold: float | None = None,
) -> StgGraph:
    """Assemble an :class:`StgGraph` from a weighted edge list.

    Parameters
    ----------
    edges:
        Tuples ``(i, j, weight)``; node indices in ``[0, num_nodes)`` and
        finite non-negative weights.  Duplicate pairs keep the maximum weight.
    num_nodes:
        Number of nodes N.
    symmetrize:
        When set, ``A <- max(A, A.T)`` so every listed direction implies both.
    threshold:
        When given, entries are binarized: a pair with ``weight <= threshold``
        becomes an edge of weight 1, heavier pairs are dropped.  Passing
        ``math.inf`` keeps every listed pair (distance-file connectivity mode).

    Raises
    ------
    InputError
        Out-of-range index, self loop, or invalid weight.
    """
    if num_nodes <= 0:
        raise InputError(f"num_nodes must be positive, got {num_nodes}")
    a = np.zeros((num_nodes, num_nodes), dtype=np.float64)
    for i, j, w in edges:
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise InputError(f"edge ({i}, {j}) out of range for N={num_nodes}")
        if i == j:
            raise InputError(f"self-loop edge at node {i} is not allowed")
        w = float(w)
        if not math.isfinite(w) or w < 0.0:
            raise InputError(f"edge ({i}, {j}) has invalid weight {w}")
        if threshold is not None:
            if w > threshold:
                continue
            w = 1.0
        a[i, j] = max(a[i, j], w)
    if symmetrize:
        a = np.maximum(a, a.T)
    elif not np.array_equal(a, a.T):
        raise InputError("edge list is not symmetric and symmetrize is off")
    canonical = [
        (int(i), int(j), float(a[i, j]))
        for i, j in zip(*np.nonzero(np.triu(a, k=1)))
    ]
    return StgGraph(
        num_nodes=num_nodes,
        edges=canonical,
        adjacency=a,
        degree=a.sum(axis=1),
    )


def normalized_laplacian(g: StgGraph) -> np.ndarray:
    """``L = I - D^{-1/2} A D^{-1/2}``.

    Isolated nodes (degree 0) get ``D^{-1/2}`` entry 0, which leaves their
    row/column equal to the identity's.
    """
    d = g.degree
    inv_sqrt = np.zeros_like(d)
    nz = d > 0.0
    inv_sqrt[nz] = 1.0 / np.sqrt(d[nz])
    lap = -g.adjacency * inv_sqrt[:, None] * inv_sqrt[None, :]
    np.fill_diagonal(lap, 1.0)
    # Exact symmetry despite floating-point: keep the lower triangle mirrored.
    lap = np.triu(lap) + np.triu(lap, k=1).T
    return lap


def jacobi_eigh(
    matrix: np.ndarray,
    tol: float = 1e-12,
    max_sweeps: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps rotate every off-diagonal pair until the off-diagonal Frobenius
    norm drops to ``tol``.  Returns ``(eigvals, eigvecs)`` in ascending
    eigenvalue order under the deterministic sign convention.

    Raises
    ------
    NumericError
        If convergence is not reached within ``max_sweeps`` sweeps.
    """
    n = matrix.shape[0]
    a = np.array(matrix, dtype=np.float64, copy=True)
    u = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), u

    skip_tol = tol / (2.0 * n)
    sweeps = 0
    # Off-diagonal Frobenius norm, summed directly over the small entries
    # (the sum-of-squares difference form cancels catastrophically).
    diag_mask = ~np.eye(n, dtype=bool)
    while True:
        off = math.sqrt(float(np.sum(a[diag_mask] ** 2)))
        if off <= tol:
            break
        if sweeps >= max_sweeps:
            raise NumericError(
                f"Jacobi eigensolver did not converge after {sweeps} sweeps "
                f"(off-diagonal norm {off:.3e} > {tol:.1e})"
            )
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip_tol:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = 0.0
                a[q, p] = 0.0
                vec_p = u[:, p].copy()
                vec_q = u[:, q].copy()
                u[:, p] = c * vec_p - s * vec_q
                u[:, q] = s * vec_p + c * vec_q

    eigvals = a.diagonal().copy()
    order = np.argsort(eigvals, kind="stable")
    eigvals = eigvals[order]
    u = u[:, order]
    # Deterministic sign: make each column's largest-magnitude entry positive.
    anchor = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[anchor, np.arange(n)])
    signs[signs == 0.0] = 1.0
    u = u * signs[None, :]
    return eigvals, u


def eigendecompose(lap: np.ndarray, symmetry_tol: float = 1e-10) -> FourierBasis:
    """Decompose a symmetric matrix into a :class:`FourierBasis`.

    For normalized Laplacians the eigenvalues land in [0, 2] and
    ``scaled_eigvals = 2 * eigvals / lambda_max - 1`` fills [-1, 1].  A
    spectrum that collapses to zero substitutes the theoretical bound 2 for
    ``lambda_max``.
    """
    if lap.ndim != 2 or lap.shape[0] != lap.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {lap.shape}")
    if float(np.max(np.abs(lap - lap.T), initial=0.0)) > symmetry_tol:
        raise InputError("matrix is not symmetric within 1e-10")
    eigvals, eigvecs = jacobi_eigh(lap)
    lambda_max = float(eigvals[-1])
    if lambda_max < 1e-12:
        lambda_max = 2.0
    scaled = 2.0 * eigvals / lambda_max - 1.0
    return FourierBasis(
        eigvecs=eigvecs,
        eigvals=eigvals,
        lambda_max=lambda_max,
        scaled_eigvals=scaled,
    )


def basis_for_graph(g: StgGraph) -> FourierBasis:
    """Eigendecompose the normalized Laplacian of ``g``."""
    return eigendecompose(normalized_laplacian(g))


def _check_rows(basis: FourierBasis, x: np.ndarray) -> None:
    if x.shape[0] != basis.num_nodes:
        raise ShapeError(
            f"signal has {x.shape[0]} rows but the basis covers {basis.num_nodes} nodes"
        )


def fourier_transform(basis: FourierBasis, x: np.ndarray) -> np.ndarray:
    """Project node-wise columns onto the spectral basis: ``U.T @ x``."""
    x = np.asarray(x, dtype=np.float64)
    _check_rows(basis, x)
    return basis.eigvecs.T @ x


def fourier_reconstruct(basis: FourierBasis, xt: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fourier_transform`: ``U @ xt``."""
    xt = np.asarray(xt, dtype=np.float64)
    _check_rows(basis, xt)
    return basis.eigvecs @ xt


def fourier_transform_multivariate(basis: FourierBasis, x: np.ndarray) -> np.ndarray:
    """Per-variable transform of an ``N x D x T`` signal array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected an N x D x T array, got shape {x.shape}")
    _check_rows(basis, x)
    return np.tensordot(basis.eigvecs.T, x, axes=1)


def fourier_reconstruct_multivariate(basis: FourierBasis, xt: np.ndarray) -> np.ndarray:
    """Per-variable reconstruction of an ``N x D x T`` spectral array."""
    xt = np.asarray(xt, dtype=np.float64)
    if xt.ndim != 3:
        raise ShapeError(f"expected an N x D x T array, got shape {xt.shape}")
    _check_rows(basis, xt)
    return np.tensordot(basis.eigvecs, xt, axes=1)


def load_distance_csv(path: str) -> tuple[list[Edge], int]:
    """Read a ``from,to,cost`` distance list.

    Returns the raw directed entries and ``max_index + 1`` (callers usually
    know the true node count and should pass it to :func:`build_graph`).
    """
    entries: list[Edge] = []
    max_idx = -1
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:3]] != ["from", "to", "cost"]:
            raise DataFormatError(f"{path}: expected header 'from,to,cost', got {header}")
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 3:
                raise DataFormatError(f"{path}:{ln}: expected 3 columns, got {len(row)}")
            try:
                i, j, cost = int(row[0]), int(row[1]), float(row[2])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{ln}: {exc}") from exc
            if cost <= 0 or not math.isfinite(cost):
                raise DataFormatError(f"{path}:{ln}: cost must be a positive real, got {cost}")
            entries.append((i, j, cost))
            max_idx = max(max_idx, i, j)
    return entries, max_idx + 1


def graph_from_distance_file(
    path: str,
    num_nodes: int | None = None,
    weighted: bool = False,
) -> StgGraph:
    """Build the sensor graph from a distance-list CSV.

    Default (binary) mode: an edge of weight 1 exists iff the pair is listed.
    Weighted mode: weights are ``1/cost``, min-max normalized over the listed
    pairs (a single distinct cost maps to weight 1).
    """
    entries, inferred = load_distance_csv(path)
    n = inferred if num_nodes is None else num_nodes
    if not weighted:
        return build_graph(entries, n, symmetrize=True, threshold=math.inf)
    inv = np.array([1.0 / cost for _, _, cost in entries])
    lo, hi = float(inv.min()), float(inv.max())
    if hi - lo < 1e-15:
        weights = np.ones_like(inv)
    else:
        weights = (inv - lo) / (hi - lo)
    edges = [(i, j, float(w)) for (i, j, _), w in zip(entries, weights)]
    return build_graph(edges, n, symmetrize=True, threshold=None)


def write_adjacency_csv(g: StgGraph, path: str) -> None:
    """Dump the dense adjacency matrix for debugging."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in g.adjacency:
            writer.writerow([repr(float(v)) for v in row])
