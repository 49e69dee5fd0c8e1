"""Road network data model, TNTP network I/O, grid generation and shortest paths."""

from __future__ import annotations

import heapq
import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Iterable, Sequence, TextIO

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, connected_components

if TYPE_CHECKING:
    from .demand import TravelerType


class TNTPFormatError(ValueError):
    """Raised when a TNTP file cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NetworkValidationError(ValueError):
    pass


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Network:
    """Directed road network with per-link BPR parameters.

    Nodes are stored densely (index ``0..n-1``); ``node_ids`` keeps the
    external identifiers (1-based for TNTP files). Link arrays are aligned:
    link ``e`` runs from ``tail[e]`` to ``head[e]`` (dense indices).
    """

    node_ids: tuple
    tail: np.ndarray
    head: np.ndarray
    free_flow_time: np.ndarray
    capacity: np.ndarray
    bpr_coeff: np.ndarray
    bpr_power: np.ndarray
    length: np.ndarray
    first_thru_node: int = 1
    name: str = ""
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n_links = len(self.tail)
        for attr, dtype in (("tail", np.int64), ("head", np.int64),
                            ("free_flow_time", float), ("capacity", float),
                            ("bpr_coeff", float), ("bpr_power", float),
                            ("length", float)):
            arr = _frozen(getattr(self, attr), dtype)
            if arr.shape != (n_links,):
                raise NetworkValidationError(f"{attr} must have one entry per link")
            object.__setattr__(self, attr, arr)
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        index = {nid: k for k, nid in enumerate(self.node_ids)}
        if len(index) != len(self.node_ids):
            raise NetworkValidationError("duplicate node identifiers")
        object.__setattr__(self, "_index", index)
        self._validate()

    def _validate(self):
        n = self.num_nodes
        if n_bad := int(np.sum((self.tail < 0) | (self.tail >= n) | (self.head < 0) | (self.head >= n))):
            raise NetworkValidationError(f"{n_bad} link(s) reference unknown nodes")
        loops = np.flatnonzero(self.tail == self.head)
        if loops.size:
            e = int(loops[0])
            raise NetworkValidationError(
                f"self-loop on node {self.node_ids[self.tail[e]]} (link {e})")
        for attr, label in (("free_flow_time", "free-flow time"), ("capacity", "capacity")):
            bad = np.flatnonzero(~(getattr(self, attr) > 0))
            if bad.size:
                e = int(bad[0])
                raise NetworkValidationError(
                    f"non-positive {label} on link {e} "
                    f"({self.node_ids[self.tail[e]]}->{self.node_ids[self.head[e]]})")
        if np.any(self.bpr_coeff < 0):
            raise NetworkValidationError("BPR coefficient must be non-negative")
        if np.any(self.bpr_power < 1):
            raise NetworkValidationError("BPR power must be at least 1")

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_links(self) -> int:
        return len(self.tail)

    def index_of(self, node_id) -> int:
        try:
            return self._index[node_id]
        except KeyError:
            raise KeyError(f"unknown node {node_id!r}") from None

    def links(self) -> Iterable[tuple]:
        """Iterate ``(tail_id, head_id, t0, capacity, beta, power, length)``."""
        for e in range(self.num_links):
            yield (self.node_ids[self.tail[e]], self.node_ids[self.head[e]],
                   float(self.free_flow_time[e]), float(self.capacity[e]),
                   float(self.bpr_coeff[e]), float(self.bpr_power[e]),
                   float(self.length[e]))

    @cached_property
    def incidence(self) -> "IncidenceView":
        return IncidenceView.build(self)

    def adjacency(self) -> sp.csr_matrix:
        n = self.num_nodes
        return sp.csr_matrix((np.ones(self.num_links), (self.tail, self.head)), shape=(n, n))

    def same_structure(self, other: "Network") -> bool:
        return (self.node_ids == other.node_ids
                and all(np.array_equal(getattr(self, a), getattr(other, a))
                        for a in ("tail", "head", "free_flow_time", "capacity",
                                  "bpr_coeff", "bpr_power", "length")))


@dataclass(frozen=True, eq=False)
class IncidenceView:
    """Per-node incoming/outgoing link lists plus the sparse matrix ``A``.

    ``A[v, e]`` is -1 when ``v`` is the tail of ``e`` and +1 when it is the head,
    so ``(A x)_v`` is inflow minus outflow.
    """

    incoming: tuple
    outgoing: tuple
    matrix: sp.csr_matrix
    abs_matrix: sp.csr_matrix

    @classmethod
    def build(cls, net: Network) -> "IncidenceView":
        n, m = net.num_nodes, net.num_links
        incoming = [[] for _ in range(n)]
        outgoing = [[] for _ in range(n)]
        for e in range(m):
            outgoing[net.tail[e]].append(e)
            incoming[net.head[e]].append(e)
        rows = np.concatenate([net.tail, net.head])
        cols = np.concatenate([np.arange(m), np.arange(m)])
        vals = np.concatenate([-np.ones(m), np.ones(m)])
        a = sp.csr_matrix((vals, (rows, cols)), shape=(n, m))
        return cls(tuple(np.array(i, dtype=np.int64) for i in incoming),
                   tuple(np.array(o, dtype=np.int64) for o in outgoing),
                   a, abs(a).tocsr())

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Return ``A x`` for a link vector, or row-wise for a (types, links) array."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.matrix @ x
        return np.asarray((self.matrix @ x.T).T)

    def apply_abs(self, x: np.ndarray) -> np.ndarray:
        """Return ``|A| x``: the sum of ``x`` over links touching each node."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.abs_matrix @ x
        return np.asarray((self.abs_matrix @ x.T).T)

    def degree(self) -> np.ndarray:
        return np.array([len(i) + len(o) for i, o in zip(self.incoming, self.outgoing)])


# ---------------------------------------------------------------------------
# TNTP I/O

_LINK_FIELDS = 10


def _read_text(text: str | TextIO) -> str:
    return text if isinstance(text, str) else text.read()


def _split_metadata(lines: Sequence[str]) -> tuple[dict, int]:
    """Parse ``<TAG> value`` lines up to ``<END OF METADATA>``.

    Returns the tag dictionary and the index of the first body line.
    """
    meta: dict[str, str] = {}
    for i, raw in enumerate(lines):
        line = raw.strip()
        if not line or line.startswith("~"):
            continue
        if not line.startswith("<"):
            raise TNTPFormatError("expected metadata tag or <END OF METADATA>", i + 1)
        close = line.find(">")
        if close < 0:
            raise TNTPFormatError(f"malformed metadata tag {line!r}", i + 1)
        tag = line[1:close].strip().upper()
        if tag == "END OF METADATA":
            return meta, i + 1
        meta[tag] = line[close + 1:].strip()
    raise TNTPFormatError("missing <END OF METADATA>")


def _int_tag(meta: dict, tag: str, required: bool = True, default: int = 0) -> int:
    if tag not in meta:
        if required:
            raise TNTPFormatError(f"missing <{tag}> tag")
        return default
    try:
        return int(float(meta[tag]))
    except ValueError:
        raise TNTPFormatError(f"<{tag}> value {meta[tag]!r} is not a number") from None


def parse_tntp_network(text: str | TextIO, name: str = "") -> Network:
    """Parse a TNTP ``*_net.tntp`` file.

    Node ids are assumed to be ``1..<NUMBER OF NODES>``; they are re-indexed to
    dense 0-based indices, with the original ids kept in ``Network.node_ids``.
    """
    lines = _read_text(text).splitlines()
    meta, start = _split_metadata(lines)
    n_nodes = _int_tag(meta, "NUMBER OF NODES")
    n_links = _int_tag(meta, "NUMBER OF LINKS")
    first_thru = _int_tag(meta, "FIRST THRU NODE", required=False, default=1)

    rows = []
    for i in range(start, len(lines)):
        line = lines[i].split("~", 1)[0].strip()
        if not line:
            continue
        fields = line.replace(";", " ").split()
        if len(fields) < _LINK_FIELDS:
            raise TNTPFormatError(
                f"link row has {len(fields)} fields, expected {_LINK_FIELDS}", i + 1)
        try:
            tail, head = int(fields[0]), int(fields[1])
            cap, length, fft, b, power = (float(f) for f in fields[2:7])
        except ValueError as exc:
            raise TNTPFormatError(f"bad numeric field: {exc}", i + 1) from None
        for nid in (tail, head):
            if not 1 <= nid <= n_nodes:
                raise TNTPFormatError(f"node {nid} outside 1..{n_nodes}", i + 1)
        rows.append((tail, head, cap, length, fft, b, power))

    if len(rows) != n_links:
        raise TNTPFormatError(f"header declares {n_links} links, found {len(rows)}")
    arr = np.array(rows, dtype=float).reshape(-1, 7)
    return Network(
        node_ids=tuple(range(1, n_nodes + 1)),
        tail=arr[:, 0].astype(np.int64) - 1,
        head=arr[:, 1].astype(np.int64) - 1,
        capacity=arr[:, 2],
        length=arr[:, 3],
        free_flow_time=arr[:, 4],
        bpr_coeff=arr[:, 5],
        bpr_power=arr[:, 6],
        first_thru_node=first_thru,
        name=name,
    )


def write_tntp_network(net: Network, out: TextIO | None = None) -> str:
    """Serialise a network in TNTP format; node ids must be integers."""
    buf = io.StringIO()
    buf.write(f"<NUMBER OF ZONES> {net.num_nodes}\n")
    buf.write(f"<NUMBER OF NODES> {net.num_nodes}\n")
    buf.write(f"<FIRST THRU NODE> {net.first_thru_node}\n")
    buf.write(f"<NUMBER OF LINKS> {net.num_links}\n")
    buf.write("<END OF METADATA>\n\n\n")
    buf.write("~\tinit_node\tterm_node\tcapacity\tlength\tfree_flow_time\tb\tpower\tspeed\ttoll\tlink_type\t;\n")
    for tail, head, t0, cap, beta, power, length in net.links():
        buf.write(f"\t{tail}\t{head}\t{cap!r}\t{length!r}\t{t0!r}\t{beta!r}\t{power!r}\t0\t0\t1\t;\n")
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text


# ---------------------------------------------------------------------------
# Synthetic networks

def generate_grid(k: int, t0: float = 1.0, capacity: float = 5000.0,
                  length: float = 1.0) -> Network:
    """Bidirectional lattice of ``k x k`` blocks: ``(k+1)**2`` nodes.

    Node ``r*(k+1) + c + 1`` sits at row ``r``, column ``c``. Every pair of
    orthogonal neighbours is joined by one link in each direction, all with
    BPR coefficient 0.15 and power 4.
    """
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ValueError(f"grid size k must be a positive integer, got {k!r}")
    side = k + 1
    arcs = []
    for r in range(side):
        for c in range(side):
            v = r * side + c
            if c + 1 < side:
                arcs += [(v, v + 1), (v + 1, v)]
            if r + 1 < side:
                arcs += [(v, v + side), (v + side, v)]
    arcs.sort()
    m = len(arcs)
    tail, head = (np.array(a, dtype=np.int64) for a in zip(*arcs))
    return Network(
        node_ids=tuple(range(1, side * side + 1)),
        tail=tail, head=head,
        free_flow_time=np.full(m, float(t0)),
        capacity=np.full(m, float(capacity)),
        bpr_coeff=np.full(m, 0.15),
        bpr_power=np.full(m, 4.0),
        length=np.full(m, float(length)),
        name=f"grid{k}",
    )


# ---------------------------------------------------------------------------
# Shortest paths

def shortest_tree(net: Network, link_costs: np.ndarray, destination: int
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Label-setting shortest paths *to* ``destination`` (dense index).

    Returns ``(potentials, next_link)``; unreachable nodes get ``inf`` and
    ``next_link == -1``. Ties between equal-cost successors go to the smaller
    head node index, then the smaller link index.
    """
    costs = np.asarray(link_costs, dtype=float)
    if costs.shape != (net.num_links,):
        raise ValueError("link_costs must have one entry per link")
    if np.any(~(costs > 0)):
        raise ValueError("link costs must be positive")
    inc = net.incidence
    tail, head = net.tail, net.head
    dist = np.full(net.num_nodes, np.inf)
    nxt = np.full(net.num_nodes, -1, dtype=np.int64)
    dist[destination] = 0.0
    done = np.zeros(net.num_nodes, dtype=bool)
    heap = [(0.0, destination)]
    while heap:
        d, v = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        for e in inc.incoming[v]:
            u = tail[e]
            if done[u]:
                continue
            nd = d + costs[e]
            if nd < dist[u]:
                dist[u] = nd
                nxt[u] = e
                heapq.heappush(heap, (nd, u))
            elif nd == dist[u] and (head[e], e) < (head[nxt[u]], nxt[u]):
                nxt[u] = e
    return dist, nxt


def shortest_potentials(net: Network, link_costs: np.ndarray, destination: int) -> np.ndarray:
    """Minimum cost from every node to ``destination``; ``inf`` if unreachable."""
    return shortest_tree(net, link_costs, destination)[0]


def all_pairs_costs(net: Network, link_costs: np.ndarray) -> np.ndarray:
    """``D[o, d]`` = shortest cost from ``o`` to ``d``."""
    return np.column_stack([shortest_potentials(net, link_costs, d)
                            for d in range(net.num_nodes)])


# ---------------------------------------------------------------------------
# Validation

@dataclass
class NetworkDiagnostics:
    strongly_connected: bool
    n_components: int
    unreachable_pairs: list = field(default_factory=list)
    dangling_nodes: list = field(default_factory=list)
    isolated_nodes: list = field(default_factory=list)
    n_pairs_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.unreachable_pairs

    def lines(self) -> list[str]:
        out = [f"strongly connected: {'yes' if self.strongly_connected else 'no'}"
               f" ({self.n_components} component(s))",
               f"OD pairs checked: {self.n_pairs_checked}, unreachable: {len(self.unreachable_pairs)}"]
        out += [f"  unreachable OD pair {o} -> {d}" for o, d in self.unreachable_pairs]
        if self.dangling_nodes:
            out.append(f"dangling nodes (no in- or out-links): {self.dangling_nodes}")
        if self.isolated_nodes:
            out.append(f"isolated nodes: {self.isolated_nodes}")
        return out


def validate_network(net: Network, types: Sequence["TravelerType"] = ()) -> NetworkDiagnostics:
    """Report OD reachability, strong connectivity and dangling nodes."""
    adj = net.adjacency()
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    reach: dict[int, np.ndarray] = {}
    unreachable = []
    for t in types:
        o, d = net.index_of(t.origin), net.index_of(t.destination)
        if o not in reach:
            mask = np.zeros(net.num_nodes, dtype=bool)
            mask[breadth_first_order(adj, o, directed=True, return_predecessors=False)] = True
            reach[o] = mask
        if not reach[o][d]:
            unreachable.append((t.origin, t.destination))
    inc = net.incidence
    dangling = [net.node_ids[v] for v in range(net.num_nodes)
                if len(inc.incoming[v]) == 0 or len(inc.outgoing[v]) == 0]
    isolated = [net.node_ids[v] for v in range(net.num_nodes)
                if len(inc.incoming[v]) == 0 and len(inc.outgoing[v]) == 0]
    return NetworkDiagnostics(
        strongly_connected=(n_comp == 1),
        n_components=int(n_comp),
        unreachable_pairs=unreachable,
        dangling_nodes=dangling,
        isolated_nodes=isolated,
        n_pairs_checked=len(types),
    )
