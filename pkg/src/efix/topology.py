"""Random geometric networks and Metropolis mixing matrices.

Networks are undirected, connected graphs over nodes 0..N-1.  A mixing
matrix is the symmetric doubly stochastic weight matrix built from a graph
by the Metropolis rule; its entries are stored sparsely (per-node neighbor
weights plus the diagonal) because every algorithm in this package touches
only neighbor weights.
"""

import json
import math
from dataclasses import dataclass

import numpy as np


class GraphGenerationError(RuntimeError):
    """No connected geometric graph found within the attempt bound."""


@dataclass(frozen=True)
class Graph:
    """Undirected graph with sorted per-node neighbor lists (no self loops)."""

    node_count: int
    neighbor_lists: tuple
    coordinates: np.ndarray | None = None

    def degree(self, i):
        return len(self.neighbor_lists[i])

    def edges(self):
        """Edge list as (i, j) pairs with i < j."""
        return [(i, j) for i in range(self.node_count)
                for j in self.neighbor_lists[i] if i < j]

    def is_connected(self):
        """Breadth-first reachability from node 0."""
        seen = {0}
        frontier = [0]
        while frontier:
            nxt = []
            for i in frontier:
                for j in self.neighbor_lists[i]:
                    if j not in seen:
                        seen.add(j)
                        nxt.append(j)
            frontier = nxt
        return len(seen) == self.node_count

    def validate(self):
        for i, nbrs in enumerate(self.neighbor_lists):
            if i in nbrs:
                raise ValueError(f"self loop at node {i}")
            for j in nbrs:
                if i not in self.neighbor_lists[j]:
                    raise ValueError(f"asymmetric edge ({i},{j})")
        if not self.is_connected():
            raise ValueError("graph is not connected")


@dataclass(frozen=True)
class MixingMatrix:
    """Symmetric doubly stochastic weights stored by neighbor list.

    ``off_diag[i]`` holds w_ij aligned with ``neighbor_lists[i]``;
    ``diag[i]`` is w_ii.  ``w_bar`` is max_i w_ii and ``lambda2`` the
    second largest eigenvalue of W in modulus.
    """

    node_count: int
    neighbor_lists: tuple
    off_diag: tuple
    diag: np.ndarray
    w_bar: float
    lambda2: float

    def weight(self, i, j):
        if i == j:
            return float(self.diag[i])
        nbrs = self.neighbor_lists[i]
        try:
            k = nbrs.index(j)
        except ValueError:
            return 0.0
        return float(self.off_diag[i][k])

    def degree(self, i):
        return len(self.neighbor_lists[i])

    def degrees(self):
        return np.array([len(nb) for nb in self.neighbor_lists])

    def to_dense(self):
        W = np.zeros((self.node_count, self.node_count))
        for i, (nbrs, ws) in enumerate(zip(self.neighbor_lists, self.off_diag)):
            W[i, list(nbrs)] = ws
            W[i, i] = self.diag[i]
        return W

    def validate(self, tol=1e-12):
        W = self.to_dense()
        if not np.allclose(W, W.T, atol=tol, rtol=0):
            raise ValueError("mixing matrix is not symmetric")
        if np.max(np.abs(W.sum(axis=1) - 1.0)) > tol:
            raise ValueError("rows do not sum to 1")
        if np.any(W < 0):
            raise ValueError("negative weight")
        if not (0 <= self.w_bar < 1):
            raise ValueError(f"w_bar={self.w_bar} outside [0,1)")


def geometric_edges(points, radius):
    """Neighbor lists for the geometric rule: edge iff distance < radius."""
    N = points.shape[0]
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    nbrs = []
    for i in range(N):
        row = [int(j) for j in range(N) if j != i and dist[i, j] < radius]
        nbrs.append(tuple(row))
    return tuple(nbrs)


def generate_geometric_graph(N, seed, max_attempts=1000):
    """Connected random geometric graph on [0,1]^2.

    Points are sampled uniformly; nodes are linked when their Euclidean
    distance is strictly below sqrt(log(N)/N).  Disconnected draws are
    resampled with the seed incremented, up to ``max_attempts`` times.

    Parameters
    ----------
    N : int
        Number of nodes, at least 2.
    seed : int
        Base seed; attempt a uses seed + a, so results are reproducible.

    Raises
    ------
    GraphGenerationError
        If no connected sample is found within the attempt bound.
    """
    if N < 2:
        raise ValueError("need at least two nodes")
    radius = math.sqrt(math.log(N) / N)
    for attempt in range(max_attempts):
        rng = np.random.default_rng(seed + attempt)
        points = rng.random((N, 2))
        g = Graph(N, geometric_edges(points, radius), coordinates=points)
        if g.is_connected():
            return g
    raise GraphGenerationError(
        f"no connected geometric graph for N={N} within {max_attempts} attempts from seed {seed}")


def _build_mixing(node_count, neighbor_lists, off, diag):
    dense = np.zeros((node_count, node_count))
    for i, (nbrs, ws) in enumerate(zip(neighbor_lists, off)):
        dense[i, list(nbrs)] = ws
        dense[i, i] = diag[i]
    lam2 = _second_modulus(dense)
    return MixingMatrix(node_count, neighbor_lists, tuple(off), diag,
                        w_bar=float(diag.max()), lambda2=lam2)


def metropolis_weights(g: Graph) -> MixingMatrix:
    """Metropolis rule: w_ij = 1/max(deg i, deg j), diagonal complements the row."""
    if not g.is_connected():
        raise ValueError("graph must be connected")
    deg = [g.degree(i) for i in range(g.node_count)]
    off = []
    diag = np.empty(g.node_count)
    for i in range(g.node_count):
        ws = np.array([1.0 / max(deg[i], deg[j]) for j in g.neighbor_lists[i]])
        off.append(ws)
        diag[i] = 1.0 - ws.sum()
    return _build_mixing(g.node_count, g.neighbor_lists, off, diag)


def _second_modulus(dense_w):
    ev = np.linalg.eigvalsh(dense_w)
    # ev sorted ascending; ev[-1] is the Perron eigenvalue 1
    return float(max(abs(ev[0]), abs(ev[-2])))


def spectral_gap(w: MixingMatrix) -> float:
    """Second largest eigenvalue of W in modulus (dense symmetric eig).

    The Perron eigenvalue 1 is excluded; 1.0 is returned (not raised) on
    degenerate bipartite-like cases, and the caller decides.
    """
    return _second_modulus(w.to_dense())


def laplacian_quadratic(w: MixingMatrix, x) -> float:
    """Disagreement x^T (I - W (x) I) x via neighbor lists.

    Computed as (1/2) sum_i sum_{j in O_i} w_ij ||x_i - x_j||^2, which is
    exactly zero on consensus vectors and nonnegative term by term.
    """
    x = np.asarray(x, dtype=float)
    if x.size % w.node_count != 0:
        raise ValueError(f"vector of size {x.size} does not split into {w.node_count} blocks")
    X = x.reshape(w.node_count, -1)
    total = 0.0
    for i in range(w.node_count):
        for k, j in enumerate(w.neighbor_lists[i]):
            d = X[i] - X[j]
            total += w.off_diag[i][k] * float(d @ d)
    return 0.5 * total


def laplacian_apply(w: MixingMatrix, X):
    """(I - W (x) I) x on a (N, n) block array; used for residual metrics."""
    X = np.asarray(X, dtype=float)
    out = np.empty_like(X)
    for i in range(w.node_count):
        acc = (1.0 - w.diag[i]) * X[i]
        for k, j in enumerate(w.neighbor_lists[i]):
            acc = acc - w.off_diag[i][k] * X[j]
        out[i] = acc
    return out


def network_to_json(g: Graph, w: MixingMatrix | None = None) -> str:
    """Serialize a graph (and optionally its mixing matrix) to JSON.

    Schema: {"n", "edges": [[i,j],...], "weights": [[i,j,w],...],
    "diag": [...]}; indices are 0-based and edges carry i < j.
    """
    doc = {"n": g.node_count, "edges": [[i, j] for i, j in g.edges()]}
    if w is not None:
        doc["weights"] = [[i, j, w.weight(i, j)] for i, j in g.edges()]
        doc["diag"] = [float(v) for v in w.diag]
    return json.dumps(doc)


def graph_from_json(text: str) -> Graph:
    doc = json.loads(text)
    N = int(doc["n"])
    nbrs = [[] for _ in range(N)]
    for i, j in doc["edges"]:
        nbrs[i].append(j)
        nbrs[j].append(i)
    return Graph(N, tuple(tuple(sorted(row)) for row in nbrs))


def mixing_from_json(text: str) -> MixingMatrix:
    doc = json.loads(text)
    if "weights" not in doc:
        raise ValueError("document carries no mixing weights")
    g = graph_from_json(text)
    lookup = {}
    for i, j, v in doc["weights"]:
        lookup[(i, j)] = float(v)
        lookup[(j, i)] = float(v)
    off = [np.array([lookup[(i, j)] for j in g.neighbor_lists[i]])
           for i in range(g.node_count)]
    diag = np.array(doc["diag"], dtype=float)
    w = _build_mixing(g.node_count, g.neighbor_lists, off, diag)
    w.validate()
    return w
