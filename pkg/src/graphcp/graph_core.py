"""Graph topology, the first-order averaging filter, and its spectrum.

The filter used throughout the package is H = (1 - tau) * I + tau * P with
P = D^-1 A the degree-normalized adjacency.  P is row-stochastic, so H
preserves constant signals and acts as a one-hop local averaging operator.
The spectral summary exposes the quantities that control the volume
shrinkage bound: the eigenvalues of P, eta = sum_i (1 - lambda_i), and
log det(H) = sum_i log(1 - tau * (1 - lambda_i)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from graphcp.exceptions import FilterSingularError, InputError

__all__ = [
    "GraphTopology",
    "GraphFilter",
    "SpectralSummary",
    "ShrinkageCheck",
    "build_topology",
    "normalized_adjacency",
    "build_filter",
    "apply_filter",
    "spectral_summary",
    "shrinkage_bound_check",
]

#: Bound-check tolerance: log det(H) <= -eta*tau + SHRINKAGE_TOL must hold.
SHRINKAGE_TOL = 1e-9


@dataclass(frozen=True)
class GraphTopology:
    """Static undirected graph on nodes 0..num_nodes-1.

    ``edges`` holds canonical (i, j) pairs with i < j.  Nodes that were
    isolated in the input carry a self-loop (recorded in ``self_loops``) so
    that every degree is at least 1 and D^-1 is always defined.
    """

    num_nodes: int
    edges: frozenset[tuple[int, int]]
    self_loops: frozenset[int]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        for i in self.self_loops:
            deg[i] += 1
        return deg

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        for i, j in self.edges:
            a[i, j] = 1.0
            a[j, i] = 1.0
        for i in self.self_loops:
            a[i, i] = 1.0
        return a

    def is_complete(self) -> bool:
        n = self.num_nodes
        return len(self.edges) == n * (n - 1) // 2


@dataclass(frozen=True)
class GraphFilter:
    """First-order averaging filter H = (1 - tau) * I + tau * D^-1 A."""

    tau: float
    operator: np.ndarray
    topology: GraphTopology

    @property
    def num_nodes(self) -> int:
        return self.topology.num_nodes


@dataclass(frozen=True)
class SpectralSummary:
    """Spectrum of D^-1 A plus the derived shrinkage quantities.

    ``eigenvalues`` are sorted descending; ``eta`` is sum(1 - lambda_i) and
    ``log_det_filter`` is log det(H) for the filter the summary was built
    from.
    """

    eigenvalues: np.ndarray
    eta: float
    log_det_filter: float
    tau: float


@dataclass(frozen=True)
class ShrinkageCheck:
    """Result of verifying log det(H) <= -eta * tau."""

    passed: bool
    slack: float


def build_topology(num_nodes: int, edges) -> GraphTopology:
    """Validate, deduplicate and symmetrize an edge list into a topology.

    Input pairs must connect distinct in-range nodes.  Nodes left isolated
    by the input receive a self-loop so the degree-normalized adjacency is
    well defined.
    """
    if num_nodes <= 0:
        raise InputError(f"num_nodes must be positive, got {num_nodes}")
    canonical = set()
    touched = np.zeros(num_nodes, dtype=bool)
    for pair in edges:
        i, j = int(pair[0]), int(pair[1])
        if i == j:
            raise InputError(f"self-edge ({i}, {i}) not allowed in input")
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise InputError(
                f"edge ({i}, {j}) out of range for num_nodes={num_nodes}"
            )
        canonical.add((min(i, j), max(i, j)))
        touched[i] = True
        touched[j] = True
    isolated = frozenset(int(i) for i in np.nonzero(~touched)[0])
    return GraphTopology(
        num_nodes=num_nodes,
        edges=frozenset(canonical),
        self_loops=isolated,
    )


def normalized_adjacency(g: GraphTopology) -> np.ndarray:
    """Degree-normalized adjacency P = D^-1 A; every row sums to 1."""
    a = g.adjacency()
    deg = g.degrees().astype(float)
    return a / deg[:, None]


def build_filter(g: GraphTopology, tau: float) -> GraphFilter:
    """Build H = (1 - tau) * I + tau * D^-1 A for tau in [0, 1]."""
    if not (0.0 <= tau <= 1.0):
        raise InputError(f"tau must be in [0, 1], got {tau}")
    h = (1.0 - tau) * np.eye(g.num_nodes) + tau * normalized_adjacency(g)
    return GraphFilter(tau=float(tau), operator=h, topology=g)


def apply_filter(f: GraphFilter, signal: np.ndarray) -> np.ndarray:
    """Diffuse a node signal by one application of H."""
    signal = np.asarray(signal, dtype=float)
    if signal.shape != (f.num_nodes,):
        raise InputError(
            f"signal has shape {signal.shape}, filter expects ({f.num_nodes},)"
        )
    return f.operator @ signal


def spectral_summary(g: GraphTopology, f: GraphFilter) -> SpectralSummary:
    """Eigenvalues of D^-1 A together with eta and log det(H).

    The spectrum is computed from the symmetric similar matrix
    D^-1/2 A D^-1/2 (same eigenvalues, stable solver).  Raises
    FilterSingularError if any 1 - tau*(1 - lambda_i) is non-positive,
    which can happen for tau > 0.5 on graphs with eigenvalues near -1.
    """
    if f.topology != g:
        raise InputError("filter was built over a different topology")
    a = g.adjacency()
    inv_sqrt_deg = 1.0 / np.sqrt(g.degrees().astype(float))
    sym = a * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]
    lam = np.linalg.eigvalsh(sym)[::-1]
    terms = 1.0 - f.tau * (1.0 - lam)
    if np.any(terms <= 0.0):
        worst = lam[int(np.argmin(terms))]
        raise FilterSingularError(f.tau, float(worst))
    eta = float(np.sum(1.0 - lam))
    log_det = float(np.sum(np.log(terms)))
    return SpectralSummary(
        eigenvalues=lam, eta=eta, log_det_filter=log_det, tau=f.tau
    )


def shrinkage_bound_check(s: SpectralSummary, tau: float) -> ShrinkageCheck:
    """Verify log det(H) <= -eta * tau and return the nonnegative slack."""
    slack = -s.eta * tau - s.log_det_filter
    return ShrinkageCheck(passed=bool(slack >= -SHRINKAGE_TOL), slack=float(slack))
