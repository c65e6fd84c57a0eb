"""Distance-threshold hypergraphs and residual hypergraph convolution.

Each vertex spawns one hyperedge: the set of vertices whose feature vectors
lie strictly closer than a threshold to it (the centroid always belongs to its
own edge). Convolution is two-stage mean aggregation with a residual: per-edge
mean of linearly transformed member features, then per-vertex mean over
incident edges, added back onto the input. Two routes are provided: an
explicit per-neighborhood spatial form and a normalized-matrix form computed
with sparse CSR kernels; with a shared transform they agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .autodiff import ShapeError, Tensor, apply_op, matmul

__all__ = [
    "Hypergraph",
    "HyperConvParams",
    "pairwise_distances",
    "build_hypergraph",
    "adaptive_lambda",
    "hyperconv_spatial",
    "hyperconv_matrix",
]

_LAMBDA_SAMPLER_SEED = 0  # fixed stream so the quantile rule is a pure function of its input


def _featarray(features: Union[Tensor, np.ndarray]) -> np.ndarray:
    arr = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ShapeError(f"expected a [N,C] feature matrix with N >= 1, got shape {arr.shape}")
    return arr


@dataclass
class Hypergraph:
    """Hyperedge membership in CSR form plus vertex/edge degree vectors."""

    num_vertices: int
    edge_ptr: np.ndarray       # int64 [E+1]
    edge_members: np.ndarray   # int64 [nnz], vertex ids grouped by edge
    vertex_degree: np.ndarray  # int64 [V], edges containing each vertex
    edge_degree: np.ndarray    # int64 [E], members of each edge
    lam: Optional[float] = None
    vertex_ptr: np.ndarray = field(init=False, repr=False)
    vertex_edges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.validate()
        # transpose CSR (vertex -> incident edges) for the aggregation kernels
        edge_of = np.repeat(np.arange(self.num_edges, dtype=np.int64), self.edge_degree)
        order = np.argsort(self.edge_members, kind="stable")
        self.vertex_edges = edge_of[order]
        self.vertex_ptr = np.concatenate(([0], np.cumsum(self.vertex_degree))).astype(np.int64)

    @property
    def num_edges(self) -> int:
        return len(self.edge_degree)

    def validate(self) -> None:
        if self.edge_members.size and (self.edge_members.min() < 0 or self.edge_members.max() >= self.num_vertices):
            raise ValueError("hypergraph: member vertex id out of range")
        counts = np.diff(self.edge_ptr)
        if not np.array_equal(counts, self.edge_degree):
            raise ValueError("hypergraph: edge_degree inconsistent with CSR layout")
        if self.num_edges and self.edge_degree.min() < 1:
            raise ValueError("hypergraph: empty hyperedge")
        vd = np.bincount(self.edge_members, minlength=self.num_vertices)
        if not np.array_equal(vd, self.vertex_degree):
            raise ValueError("hypergraph: vertex_degree inconsistent with membership")
        if self.num_vertices and self.vertex_degree.min() < 1:
            raise ValueError("hypergraph: vertex belongs to no hyperedge")

    def members(self, e: int) -> np.ndarray:
        return self.edge_members[self.edge_ptr[e]:self.edge_ptr[e + 1]]

    def incident_edges(self, v: int) -> np.ndarray:
        return self.vertex_edges[self.vertex_ptr[v]:self.vertex_ptr[v + 1]]

    def incidence_dense(self) -> np.ndarray:
        """Dense |V| x |E| incidence matrix; intended for small graphs."""
        h = np.zeros((self.num_vertices, self.num_edges))
        for e in range(self.num_edges):
            h[self.members(e), e] = 1.0
        return h

    def stats(self) -> dict:
        """Summary used by the hg-debug command."""
        vh = np.bincount(self.vertex_degree)
        eh = np.bincount(self.edge_degree)
        return {
            "num_vertices": int(self.num_vertices),
            "num_edges": int(self.num_edges),
            "lambda": None if self.lam is None else float(self.lam),
            "vertex_degree_hist": {str(d): int(c) for d, c in enumerate(vh) if c},
            "edge_degree_hist": {str(d): int(c) for d, c in enumerate(eh) if c},
        }


@dataclass
class HyperConvParams:
    """Shared linear transform applied to member features before aggregation."""

    theta: Tensor


def _pairwise(arr: np.ndarray) -> np.ndarray:
    sq = (arr * arr).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (arr @ arr.T)
    d2 = (d2 + d2.T) * 0.5  # enforce exact symmetry
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def pairwise_distances(features: Union[Tensor, np.ndarray]) -> Tensor:
    """Euclidean distance matrix of row vectors: symmetric, zero diagonal."""
    return Tensor(_pairwise(_featarray(features)))


def build_hypergraph(features: Union[Tensor, np.ndarray], lam: float) -> Hypergraph:
    """One hyperedge per centroid vertex v: {u : ||x_u - x_v|| < lam}.

    The inequality is strict, so a threshold equal to an exact distance
    excludes that neighbor; the centroid itself is always a member.
    """
    if lam <= 0:
        raise ValueError(f"build_hypergraph: lambda must be > 0, got {lam}")
    arr = _featarray(features)
    n = arr.shape[0]
    member = _pairwise(arr) < lam  # member[e, u]: u belongs to the edge centered at e
    edge_degree = member.sum(axis=1).astype(np.int64)
    vertex_degree = member.sum(axis=0).astype(np.int64)
    edge_members = np.nonzero(member)[1].astype(np.int64)
    edge_ptr = np.concatenate(([0], np.cumsum(edge_degree))).astype(np.int64)
    return Hypergraph(n, edge_ptr, edge_members, vertex_degree, edge_degree, lam=float(lam))


def adaptive_lambda(features: Union[Tensor, np.ndarray], quantile: float = 0.1,
                    max_pairs: int = 512) -> float:
    """Data-adaptive threshold: the q-quantile of sampled pairwise distances.

    All pairs are used when there are at most ``max_pairs`` of them; otherwise
    pairs are drawn from a fixed stream so the rule stays a pure function of
    its input. Degenerate inputs (quantile not positive) fall back to the
    smallest positive sampled distance, or 1.0 if every distance is zero.
    """
    if not (0.0 <= quantile <= 1.0):
        raise ValueError(f"adaptive_lambda: quantile must be in [0,1], got {quantile}")
    arr = _featarray(features)
    n = arr.shape[0]
    if n == 1:
        return 1.0
    n_pairs = n * (n - 1) // 2
    if n_pairs <= max_pairs:
        d = _pairwise(arr)
        ds = d[np.triu_indices(n, k=1)]
    else:
        rng = np.random.default_rng(_LAMBDA_SAMPLER_SEED)
        i = rng.integers(0, n, size=max_pairs)
        j = rng.integers(0, n - 1, size=max_pairs)
        j = np.where(j >= i, j + 1, j)  # distinct endpoints
        ds = np.sqrt(((arr[i] - arr[j]) ** 2).sum(axis=1))
    lam = float(np.quantile(ds, quantile))
    if lam <= 0.0:
        pos = ds[ds > 0]
        lam = float(pos.min()) if pos.size else 1.0
    return lam


def _conv_checks(x: Tensor, hg: Hypergraph, params: HyperConvParams) -> None:
    th = params.theta
    if x.ndim != 2:
        raise ShapeError(f"hyperconv: expected [N,C] vertex features, got {x.shape}")
    if x.shape[0] != hg.num_vertices:
        raise ShapeError(f"hyperconv: {x.shape[0]} feature rows but hypergraph has {hg.num_vertices} vertices")
    if th.ndim != 2 or th.shape[0] != x.shape[1] or th.shape[0] != th.shape[1]:
        raise ShapeError(
            f"hyperconv: residual connection needs a square transform matching C={x.shape[1]}, got {th.shape}")


def hyperconv_spatial(x: Tensor, hg: Hypergraph, params: HyperConvParams) -> Tensor:
    """Two-stage neighborhood form: per-edge mean of transformed member
    features, then per-vertex mean over incident edges, plus the residual."""
    _conv_checks(x, hg, params)
    th = params.theta
    xd, thd = x.data, th.data
    n, c = xd.shape
    e = hg.num_edges

    t = xd @ thd
    edge_feat = np.empty((e, c), dtype=xd.dtype)
    for ei in range(e):
        mem = hg.members(ei)
        edge_feat[ei] = t[mem].sum(axis=0) / len(mem)
    out = xd.copy()
    for v in range(n):
        inc = hg.incident_edges(v)
        out[v] += edge_feat[inc].sum(axis=0) / len(inc)

    def bwd(g):
        gedge = np.zeros((e, c), dtype=xd.dtype)
        for v in range(n):
            inc = hg.incident_edges(v)
            gedge[inc] += g[v] / len(inc)
        gt = np.zeros((n, c), dtype=xd.dtype)
        for ei in range(e):
            mem = hg.members(ei)
            gt[mem] += gedge[ei] / len(mem)
        gx = g + gt @ thd.T
        gth = xd.T @ gt
        return gx, gth

    return apply_op("hyperconv_spatial", (x, th), out, bwd)


def _normalized_aggregate(z: Tensor, hg: Hypergraph) -> Tensor:
    """M @ z with M = D_v^-1 H D_e^-1 H^T, via two CSR mean passes."""
    de = hg.edge_degree[:, None].astype(z.dtype)
    dv = hg.vertex_degree[:, None].astype(z.dtype)
    eptr, vptr = hg.edge_ptr[:-1], hg.vertex_ptr[:-1]

    def forward(arr):
        edge_mean = np.add.reduceat(arr[hg.edge_members], eptr, axis=0) / de
        return np.add.reduceat(edge_mean[hg.vertex_edges], vptr, axis=0) / dv

    out = forward(z.data)

    def bwd(g):
        # transpose route: H D_e^-1 H^T D_v^-1
        u = g / dv
        w = np.add.reduceat(u[hg.edge_members], eptr, axis=0) / de
        return (np.add.reduceat(w[hg.vertex_edges], vptr, axis=0),)

    return apply_op("hg_aggregate", (z,), out, bwd)


def hyperconv_matrix(x: Tensor, hg: Hypergraph, params: HyperConvParams) -> Tensor:
    """Normalized-matrix form: x + D_v^-1 H D_e^-1 H^T x Theta, never
    materializing the dense incidence matrix."""
    _conv_checks(x, hg, params)
    z = matmul(x, params.theta)
    return x + _normalized_aggregate(z, hg)
