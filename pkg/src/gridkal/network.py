"""Pipeline network graph: data model, JSON ingestion, validation, incidence."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

INTERIOR = "interior"
BOUNDARY = "boundary"

_NODE_KEYS = {"id", "kind"}
_EDGE_KEYS = {"id", "from", "to", "length", "a", "b", "d", "d_lin"}
_EDGE_REQUIRED = _EDGE_KEYS - {"d_lin"}


class NetworkError(ValueError):
    """Raised when a network file cannot be turned into a valid PipeNetwork.

    ``locus`` names the offending entity or file position.
    """

    def __init__(self, message: str, locus: str | None = None):
        super().__init__(f"{locus}: {message}" if locus else message)
        self.locus = locus


@dataclass(frozen=True)
class PipeEdge:
    id: str
    source: str
    target: str
    length: float
    a: float
    b: float
    d: float
    d_lin: float | None = None


@dataclass(frozen=True)
class Node:
    id: str
    kind: str


@dataclass(frozen=True)
class Diagnostic:
    entity: str
    rule: str
    message: str

    def __str__(self) -> str:
        return f"[{self.rule}] {self.entity}: {self.message}"


@dataclass(frozen=True)
class IncidenceMaps:
    ingoing: Mapping[str, frozenset[str]]
    outgoing: Mapping[str, frozenset[str]]


@dataclass(frozen=True)
class PipeNetwork:
    nodes: tuple[Node, ...]
    edges: tuple[PipeEdge, ...]
    _edge_index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "_edge_index", {e.id: e for e in self.edges})

    @property
    def boundary_nodes(self) -> list[str]:
        return [n.id for n in self.nodes if n.kind == BOUNDARY]

    @property
    def interior_nodes(self) -> list[str]:
        return [n.id for n in self.nodes if n.kind == INTERIOR]

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def node_kind(self, node_id: str) -> str | None:
        for n in self.nodes:
            if n.id == node_id:
                return n.kind
        return None

    def edge(self, edge_id: str) -> PipeEdge:
        return self._edge_index[edge_id]

    def with_edges(self, edges: Iterable[PipeEdge]) -> "PipeNetwork":
        return PipeNetwork(self.nodes, tuple(edges))


def _number(value, locus: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise NetworkError(f"expected a number, got {value!r}", locus)
    return float(value)


def network_from_dict(data: Mapping, check: bool = True) -> PipeNetwork:
    """Build a network from the decoded JSON document.

    Schema problems (missing or unknown keys, unknown node references,
    duplicate ids) raise :class:`NetworkError`. Physical invariants are
    checked too unless ``check`` is false; :func:`validate_network` then
    collects them.
    """
    if not isinstance(data, Mapping):
        raise NetworkError("top level must be an object", "$")
    extra = set(data) - {"nodes", "edges"}
    if extra:
        raise NetworkError(f"unknown keys {sorted(extra)}", "$")
    for key in ("nodes", "edges"):
        if key not in data:
            raise NetworkError(f"missing field '{key}'", "$")
        if not isinstance(data[key], list):
            raise NetworkError("expected a list", f"$.{key}")

    nodes = []
    seen: set[str] = set()
    for i, raw in enumerate(data["nodes"]):
        locus = f"$.nodes[{i}]"
        if not isinstance(raw, Mapping):
            raise NetworkError("expected an object", locus)
        missing = _NODE_KEYS - set(raw)
        if missing:
            raise NetworkError(f"missing field '{sorted(missing)[0]}'", locus)
        extra = set(raw) - _NODE_KEYS
        if extra:
            raise NetworkError(f"unknown keys {sorted(extra)}", locus)
        nid, kind = raw["id"], raw["kind"]
        if not isinstance(nid, str):
            raise NetworkError("node id must be a string", locus)
        if kind not in (INTERIOR, BOUNDARY):
            raise NetworkError(f"kind must be 'interior' or 'boundary', got {kind!r}", nid)
        if nid in seen:
            raise NetworkError("duplicate node id", nid)
        seen.add(nid)
        nodes.append(Node(nid, kind))

    edges = []
    seen_edges: set[str] = set()
    for i, raw in enumerate(data["edges"]):
        locus = f"$.edges[{i}]"
        if not isinstance(raw, Mapping):
            raise NetworkError("expected an object", locus)
        missing = _EDGE_REQUIRED - set(raw)
        if missing:
            raise NetworkError(f"missing field '{sorted(missing)[0]}'", locus)
        extra = set(raw) - _EDGE_KEYS
        if extra:
            raise NetworkError(f"unknown keys {sorted(extra)}", locus)
        eid = raw["id"]
        if not isinstance(eid, str):
            raise NetworkError("edge id must be a string", locus)
        if eid in seen_edges:
            raise NetworkError("duplicate edge id", eid)
        seen_edges.add(eid)
        for end in ("from", "to"):
            if raw[end] not in seen:
                raise NetworkError(f"unknown node '{raw[end]}' in field '{end}'", eid)
        d_lin = raw.get("d_lin")
        edges.append(
            PipeEdge(
                id=eid,
                source=raw["from"],
                target=raw["to"],
                length=_number(raw["length"], f"{eid}.length"),
                a=_number(raw["a"], f"{eid}.a"),
                b=_number(raw["b"], f"{eid}.b"),
                d=_number(raw["d"], f"{eid}.d"),
                d_lin=None if d_lin is None else _number(d_lin, f"{eid}.d_lin"),
            )
        )
    net = PipeNetwork(tuple(nodes), tuple(edges))
    problems = validate_network(net) if check else []
    if problems:
        first = problems[0]
        raise NetworkError(f"{first.rule}: {first.message}", first.entity)
    return net


def parse_network(text: str, check: bool = True) -> PipeNetwork:
    """Parse network JSON text. Decoding errors report line and column."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkError(exc.msg, f"line {exc.lineno} column {exc.colno}") from exc
    return network_from_dict(data, check)


def load_network(path, check: bool = True) -> PipeNetwork:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_network(fh.read(), check)
    except FileNotFoundError:
        raise NetworkError(f"file not found: {path}", str(path)) from None


def network_to_dict(net: PipeNetwork) -> dict:
    edges = []
    for e in net.edges:
        row = {"id": e.id, "from": e.source, "to": e.target, "length": e.length,
               "a": e.a, "b": e.b, "d": e.d}
        if e.d_lin is not None:
            row["d_lin"] = e.d_lin
        edges.append(row)
    return {"nodes": [{"id": n.id, "kind": n.kind} for n in net.nodes], "edges": edges}


def serialize_network(net: PipeNetwork) -> str:
    return json.dumps(network_to_dict(net), indent=2)


def validate_network(net: PipeNetwork) -> list[Diagnostic]:
    """Check every PipeNetwork invariant; violations are returned, never raised."""
    out: list[Diagnostic] = []
    node_ids = [n.id for n in net.nodes]
    known = set(node_ids)
    if len(known) != len(node_ids):
        dups = sorted({i for i in node_ids if node_ids.count(i) > 1})
        out += [Diagnostic(i, "unique-id", "duplicate node id") for i in dups]
    edge_ids = [e.id for e in net.edges]
    if len(set(edge_ids)) != len(edge_ids):
        dups = sorted({i for i in edge_ids if edge_ids.count(i) > 1})
        out += [Diagnostic(i, "unique-id", "duplicate edge id") for i in dups]
    for n in net.nodes:
        if n.kind not in (INTERIOR, BOUNDARY):
            out.append(Diagnostic(n.id, "node-kind", f"unknown kind {n.kind!r}"))

    for e in net.edges:
        for end in (e.source, e.target):
            if end not in known:
                out.append(Diagnostic(e.id, "known-node", f"references unknown node '{end}'"))
        if e.source == e.target:
            out.append(Diagnostic(e.id, "no-self-loop", f"starts and ends at '{e.source}'"))
        for name in ("length", "a", "b"):
            value = getattr(e, name)
            if not value > 0:
                out.append(Diagnostic(e.id, "positivity", f"{name} must be > 0, got {value}"))
        if not e.d >= 0:
            out.append(Diagnostic(e.id, "non-negativity", f"d must be >= 0, got {e.d}"))
        if e.d_lin is not None and not e.d_lin >= 0:
            out.append(Diagnostic(e.id, "non-negativity", f"d_lin must be >= 0, got {e.d_lin}"))

    if not any(n.kind == BOUNDARY for n in net.nodes):
        out.append(Diagnostic("network", "has-boundary", "no boundary node"))

    if net.nodes:
        adj: dict[str, set[str]] = {i: set() for i in known}
        for e in net.edges:
            if e.source in known and e.target in known:
                adj[e.source].add(e.target)
                adj[e.target].add(e.source)
        start = node_ids[0]
        reached = {start}
        queue = deque([start])
        while queue:
            for nb in adj[queue.popleft()]:
                if nb not in reached:
                    reached.add(nb)
                    queue.append(nb)
        if reached != known:
            stray = sorted(known - reached)
            out.append(Diagnostic(stray[0], "connected",
                                  f"graph is disconnected; unreachable nodes {stray}"))
    return out


def incidence_maps(net: PipeNetwork) -> IncidenceMaps:
    ingoing: dict[str, set[str]] = {n.id: set() for n in net.nodes}
    outgoing: dict[str, set[str]] = {n.id: set() for n in net.nodes}
    for e in net.edges:
        ingoing[e.target].add(e.id)
        outgoing[e.source].add(e.id)
    return IncidenceMaps(
        ingoing={k: frozenset(v) for k, v in ingoing.items()},
        outgoing={k: frozenset(v) for k, v in outgoing.items()},
    )


# Representative nondimensional parameters; NOT the values behind the published
# diamond results, which are not printed there.
DIAMOND_DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    f"e{i}": {"l": 1.0, "a": 1e-3, "b": 1e-3, "d": 1.5} for i in range(1, 8)
}

# v1 -> v4 -> {v3, v5}, crossing edge v3 -> v5, v3/v5 -> v6 -> v2
DIAMOND_TOPOLOGY = (
    ("e1", "v1", "v4"),
    ("e2", "v4", "v3"),
    ("e3", "v4", "v5"),
    ("e4", "v3", "v5"),
    ("e5", "v3", "v6"),
    ("e6", "v5", "v6"),
    ("e7", "v6", "v2"),
)


def builtin_diamond(params: Mapping[str, Mapping[str, float]] | None = None) -> PipeNetwork:
    """Seven-pipe diamond with boundary nodes v1 (inlet) and v2 (outlet).

    ``params`` maps edge ids ``e1``..``e7`` to ``{"l", "a", "b", "d"}``;
    defaults to :data:`DIAMOND_DEFAULT_PARAMS`.
    """
    params = DIAMOND_DEFAULT_PARAMS if params is None else params
    nodes = [Node("v1", BOUNDARY), Node("v2", BOUNDARY)] + [
        Node(f"v{i}", INTERIOR) for i in range(3, 7)
    ]
    edges = []
    for eid, src, dst in DIAMOND_TOPOLOGY:
        if eid not in params:
            raise NetworkError("missing parameter row", eid)
        row = params[eid]
        try:
            edges.append(PipeEdge(eid, src, dst, float(row["l"]), float(row["a"]),
                                  float(row["b"]), float(row["d"])))
        except KeyError as exc:
            raise NetworkError(f"missing parameter {exc.args[0]!r}", eid) from None
    return PipeNetwork(tuple(nodes), tuple(edges))


def set_linear_friction(net: PipeNetwork, d_lin: Mapping[str, float]) -> PipeNetwork:
    return net.with_edges(replace(e, d_lin=float(d_lin[e.id])) for e in net.edges)
