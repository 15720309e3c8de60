"""Weighted graphs, normalized Laplacians, and Chebyshev graph convolution.

The convolution filters a node-signal matrix with a K-localized polynomial of
the rescaled Laplacian, evaluated by the three-term recursion applied directly
to the signal. An exact spectral form computed from a full eigendecomposition
(cyclic Jacobi) is provided for verification on small graphs only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, GraphError, UsageError
from .tensor import Tensor, apply_op

log = logging.getLogger(__name__)

_SYM_TOL = 1e-12


class Graph:
    """Undirected weighted graph: symmetric nonnegative adjacency, zero diagonal."""

    __slots__ = ("n", "weights")

    def __init__(self, weights: np.ndarray):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise GraphError(f"adjacency must be square, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise GraphError("adjacency holds non-finite values")
        if np.abs(w - w.T).max(initial=0.0) > _SYM_TOL:
            raise GraphError("adjacency is not symmetric")
        if w.size and w.min() < 0:
            raise GraphError("adjacency holds negative weights")
        if np.abs(np.diag(w)).max(initial=0.0) != 0.0:
            raise GraphError("adjacency diagonal must be zero")
        self.n = w.shape[0]
        self.weights = w

    @classmethod
    def from_edges(cls, n: int, edges) -> "Graph":
        """Build from (i, j, w) triples; parallel entries keep the max weight."""
        w = np.zeros((n, n))
        for i, j, wt in edges:
            if not 0 <= i < n and 0 <= j < n:
                raise GraphError(f"edge ({i},{j}) out of range for n={n}")
            if i == j:
                raise GraphError(f"self loop at node {i}")
            w[i, j] = max(w[i, j], wt)
            w[j, i] = w[i, j]
        return cls(w)

    def edges(self):
        """Edges as (i, j, w) with i < j, in lexicographic order."""
        out = []
        for i in range(self.n):
            for j in range(i + 1, self.n):
                if self.weights[i, j] > 0:
                    out.append((i, j, float(self.weights[i, j])))
        return out

    def degrees(self) -> np.ndarray:
        """Weighted degree per node."""
        return self.weights.sum(axis=1)

    def total_weight(self) -> float:
        return float(self.weights.sum()) / 2.0

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, edges={len(self.edges())})"


def jacobi_eigh(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns (eigenvalues ascending, eigenvector columns). Small matrices only;
    this is the independent route used to verify spectral properties.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise UsageError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    n = a.shape[0]
    if n > 64:
        raise UsageError("jacobi_eigh is restricted to n <= 64")
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    order = np.argsort(np.diag(a), kind="stable")
    return np.diag(a)[order], v[:, order]


@dataclass
class SpectralDecomposition:
    """Graph Fourier basis U and eigenvalues of the normalized Laplacian."""

    eigvecs: np.ndarray  # columns are eigenvectors
    eigvals: np.ndarray  # ascending

    @classmethod
    def of(cls, laplacian: np.ndarray) -> "SpectralDecomposition":
        vals, vecs = jacobi_eigh(laplacian)
        return cls(eigvecs=vecs, eigvals=vals)


class GraphLaplacian:
    """Normalized Laplacian with its largest eigenvalue and rescaled form."""

    __slots__ = ("n", "lap", "lambda_max", "rescaled", "_rescaled_tensor")

    def __init__(self, lap: np.ndarray, lambda_max: float):
        self.n = lap.shape[0]
        self.lap = lap
        self.lambda_max = float(lambda_max)
        self.rescaled = 2.0 * lap / self.lambda_max - np.eye(self.n)
        self._rescaled_tensor = Tensor(self.rescaled)

    def rescaled_tensor(self) -> Tensor:
        """The rescaled Laplacian as a constant tensor for convolution."""
        return self._rescaled_tensor


def normalized_laplacian(g: Graph, lambda_max: float | None = None) -> GraphLaplacian:
    """L = I - D^{-1/2} W D^{-1/2}; zero-degree nodes yield identity rows.

    lambda_max=None estimates the largest eigenvalue by power iteration;
    passing a number (commonly 2.0) forces that value instead.
    """
    deg = g.degrees()
    inv_sqrt = np.zeros_like(deg)
    pos = deg > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(deg[pos])
    lap = np.eye(g.n) - (inv_sqrt[:, None] * g.weights) * inv_sqrt[None, :]
    lap = 0.5 * (lap + lap.T)  # kill rounding asymmetry
    if lambda_max is None:
        lambda_max = estimate_lambda_max(lap)
    return GraphLaplacian(lap, float(lambda_max))


def estimate_lambda_max(
    lap: np.ndarray, tol: float = 1e-7, max_iter: int = 10000
) -> float:
    """Largest eigenvalue of a normalized Laplacian via power iteration.

    Iterates on L + I (spectrum in [1, 3], so the top eigenvalue dominates) and
    subtracts the shift. Falls back to the spectral bound 2.0 with a warning
    when the residual never drops below tol.
    """
    n = lap.shape[0]
    if np.abs(lap - lap.T).max(initial=0.0) > 1e-9:
        raise GraphError("lambda_max estimation requires a symmetric matrix")
    if n == 0:
        return 2.0
    shifted = lap + np.eye(n)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        u = shifted @ v
        norm = np.linalg.norm(u)
        if norm == 0.0:
            break
        v = u / norm
        u = shifted @ v
        lam = float(v @ u)
        if np.linalg.norm(u - lam * v) <= tol:
            return lam - 1.0
    log.warning("power iteration did not converge; falling back to lambda_max=2")
    return 2.0


class ChebKernel:
    """Chebyshev filter coefficients, shape (K, C_out, C_in)."""

    __slots__ = ("theta", "order")

    def __init__(self, theta: Tensor):
        if theta.data.ndim != 3:
            raise DimensionError("ChebKernel theta must have shape (K, C_out, C_in)")
        if theta.data.shape[0] < 1:
            raise UsageError("ChebKernel order K must be >= 1")
        self.theta = theta
        self.order = theta.data.shape[0]

    @property
    def c_in(self) -> int:
        return self.theta.data.shape[2]

    @property
    def c_out(self) -> int:
        return self.theta.data.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, k: int, c_out: int, c_in: int):
        return cls(T.glorot_from(rng, (k, c_out, c_in)))


def kernel_matrix(kernel: ChebKernel) -> Tensor:
    """Fold (K, C_out, C_in) coefficients into a (K*C_in, C_out) matrix so the
    filter applies as one product against the stacked Chebyshev basis."""
    theta = kernel.theta
    k, c_out, c_in = theta.data.shape
    folded = np.transpose(theta.data, (0, 2, 1)).reshape(k * c_in, c_out)

    def pull(g):
        return (np.transpose(g.reshape(k, c_in, c_out), (0, 2, 1)),)

    return apply_op(folded, (theta,), pull)


def cheb_basis(lap: GraphLaplacian, x: Tensor, order: int) -> Tensor:
    """Stack [T_0(L~)x | ... | T_{K-1}(L~)x] along the channel axis.

    The recursion T_k = 2 L~ T_{k-1} - T_{k-2} is applied to the signal, never
    materializing polynomial matrices.
    """
    if x.data.shape[-2] != lap.n:
        raise DimensionError(
            f"signal node extent {x.data.shape[-2]} != graph size {lap.n}"
        )
    lt = lap.rescaled_tensor()
    terms = [x]
    if order > 1:
        terms.append(T.matmul(lt, x))
    for _ in range(2, order):
        terms.append(T.sub(T.scale(T.matmul(lt, terms[-1]), 2.0), terms[-2]))
    out = terms[0]
    for term in terms[1:]:
        out = T.concat_channels(out, term)
    return out


def cheb_conv(kernel: ChebKernel, lap: GraphLaplacian, x: Tensor) -> Tensor:
    """K-localized graph convolution: sum_k T_k(L~) x theta_k^T."""
    if x.data.shape[-1] != kernel.c_in:
        raise DimensionError(
            f"signal channels {x.data.shape[-1]} != kernel C_in {kernel.c_in}"
        )
    basis = cheb_basis(lap, x, kernel.order)
    return T.matmul(basis, kernel_matrix(kernel))


def spectral_conv_oracle(
    kernel: ChebKernel,
    decomp: SpectralDecomposition,
    lambda_max: float,
    x: np.ndarray,
) -> np.ndarray:
    """Exact spectral-domain filter U g(Lambda) U^T x; test oracle only.

    Evaluates the Chebyshev polynomial entrywise on the rescaled eigenvalues,
    which must agree with the signal-space recursion.
    """
    u = decomp.eigvecs
    n = u.shape[0]
    if n > 64:
        raise UsageError("spectral_conv_oracle is restricted to n <= 64")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != n:
        raise DimensionError("signal node extent does not match the decomposition")
    lam = 2.0 * decomp.eigvals / lambda_max - 1.0
    k_order = kernel.order
    cheb_vals = np.empty((k_order, n))
    cheb_vals[0] = 1.0
    if k_order > 1:
        cheb_vals[1] = lam
    for k in range(2, k_order):
        cheb_vals[k] = 2.0 * lam * cheb_vals[k - 1] - cheb_vals[k - 2]
    theta = kernel.theta.data  # (K, C_out, C_in)
    # filter response per eigenvalue: (n, C_out, C_in)
    response = np.einsum("koi,kn->noi", theta, cheb_vals)
    xi = u.T @ x  # spectral coefficients (n, C_in)
    yi = np.einsum("noi,ni->no", response, xi)
    return u @ yi
