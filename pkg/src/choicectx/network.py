"""Triadic-closure choices from temporal directed networks.

Replaying a time-ordered edge stream, every *new* edge ``u -> w`` that
closes a wedge ``u -> v -> w`` becomes a choice: ``u`` picked ``w`` out of
the out-neighbors of ``v`` that ``u`` was not yet linked to.  Each candidate
is described by six node features evaluated just before the edge appears.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Hashable, NamedTuple

import numpy as np

from .data import ChoiceDataset
from .models import LCLParams, MNLParams, context_adjusted_preferences

logger = logging.getLogger(__name__)

FEATURE_NAMES = (
    "in_degree",
    "shared_neighbors",
    "reciprocal_weight",
    "send_recency",
    "receive_recency",
    "reciprocal_recency",
)

SYNTHETIC_THETA = np.array([2.0, 1.0, 3.0, 1.0, 3.0, 5.0])
SYNTHETIC_A = np.array([
    [0, 0, 0, 0, 0, 100],
    [0, 0, 5, 0, 0, 0],
    [0, -5, 0, 0, 0, 0],
    [-5, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0],
    [0, 0, 5, 0, 0, 0],
], dtype=float)


class TemporalEdge(NamedTuple):
    src: Hashable
    dst: Hashable
    timestamp: int


class EdgeFormatError(ValueError):
    pass


def ingest_edges(path, format: str = "tsv") -> tuple[list[TemporalEdge], int]:
    """Read ``src dst timestamp`` lines; returns time-sorted edges and the self-loop count.

    Ties keep file order.
    """
    if format != "tsv":
        raise EdgeFormatError(f"unsupported edge format {format!r}")
    edges = []
    loops = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 3:
                raise EdgeFormatError(f"line {lineno}: expected 3 fields, got {len(parts)}")
            src, dst, ts = (p.strip() for p in parts)
            try:
                t = int(ts)
            except ValueError:
                raise EdgeFormatError(f"line {lineno}: timestamp {ts!r} is not an integer") from None
            if src == dst:
                loops += 1
                continue
            edges.append(TemporalEdge(src, dst, t))
    if loops:
        logger.warning("dropped %d self-loop(s) from %s", loops, path)
    edges.sort(key=lambda e: e.timestamp)
    return edges, loops


def write_edges(edges, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in edges:
            fh.write(f"{e.src}\t{e.dst}\t{e.timestamp}\n")


class GraphState:
    """Directed multigraph with edge weights and last-event timestamps."""

    def __init__(self, nodes=()):
        self.out: dict = {}
        self.inn: dict = {}
        self.nbrs: dict = {}
        self.weight: dict = {}
        self.last_pair: dict = {}
        self.last_send: dict = {}
        self.last_recv: dict = {}
        for node in nodes:
            self._touch(node)

    def _touch(self, node):
        if node not in self.out:
            self.out[node] = set()
            self.inn[node] = set()
            self.nbrs[node] = set()

    def __contains__(self, node) -> bool:
        return node in self.out

    def has_edge(self, u, w) -> bool:
        return (u, w) in self.weight

    def in_degree(self, w) -> int:
        return len(self.inn[w])

    def add_edge(self, u, w, t) -> None:
        self._touch(u)
        self._touch(w)
        self.out[u].add(w)
        self.inn[w].add(u)
        self.nbrs[u].add(w)
        self.nbrs[w].add(u)
        self.weight[(u, w)] = self.weight.get((u, w), 0) + 1
        self.last_pair[(u, w)] = t
        self.last_send[u] = t
        self.last_recv[w] = t


def _recency(now, then) -> float:
    if then is None:
        return 0.0
    return 1.0 / math.log(2.0 + (now - then))


def node_features(u, w, state: GraphState, now) -> np.ndarray:
    """The six transformed features of candidate ``w`` for chooser ``u`` at time ``now``."""
    if w not in state or u not in state:
        raise KeyError(f"node {w if w not in state else u!r} is not in the graph")
    indeg = len(state.inn[w])
    shared = len(state.nbrs[u] & state.nbrs[w])
    if indeg == 0 or shared == 0:
        raise ValueError(f"candidate {w!r} has in-degree {indeg} and {shared} shared neighbors with {u!r}; "
                         "both must be positive for a closure candidate")
    return np.array([
        math.log(indeg),
        math.log(shared),
        math.log1p(state.weight.get((w, u), 0)),
        _recency(now, state.last_send.get(w)),
        _recency(now, state.last_recv.get(w)),
        _recency(now, state.last_pair.get((w, u))),
    ])


@dataclass
class ClosureChoice:
    u: Hashable
    v: Hashable
    w: Hashable
    candidates: list
    features: np.ndarray
    t: int

    def to_json(self) -> dict:
        return {"u": _plain(self.u), "v": _plain(self.v), "w": _plain(self.w),
                "candidates": [_plain(c) for c in self.candidates], "t": int(self.t)}


def _plain(node):
    return node.item() if isinstance(node, np.generic) else node


def _candidate_features(u, candidates, state, now):
    """Feature rows for many candidates at once; same values as :func:`node_features`."""
    nbrs_u = state.nbrs[u]
    log, weight, pair, send, recv = math.log, state.weight, state.last_pair, state.last_send, state.last_recv
    rows = []
    for w in candidates:
        indeg = len(state.inn[w])
        shared = len(nbrs_u & state.nbrs[w])
        if indeg == 0 or shared == 0:
            return np.array([node_features(u, c, state, now) for c in candidates])
        t_send, t_recv, t_pair = send.get(w), recv.get(w), pair.get((w, u))
        rows.append((
            log(indeg),
            log(shared),
            math.log1p(weight.get((w, u), 0)),
            0.0 if t_send is None else 1.0 / log(2.0 + (now - t_send)),
            0.0 if t_recv is None else 1.0 / log(2.0 + (now - t_recv)),
            0.0 if t_pair is None else 1.0 / log(2.0 + (now - t_pair)),
        ))
    return np.array(rows)


def _to_dataset(log: list[ClosureChoice]) -> ChoiceDataset | None:
    if not log:
        return None
    return ChoiceDataset.from_observations(((c.features, c.candidates.index(c.w)) for c in log), FEATURE_NAMES)


@dataclass
class ExtractionResult:
    dataset: ChoiceDataset | None
    log: list[ClosureChoice]
    skipped_small: int
    repeat_edges: int


def extract_closures(edges, seed: int = 0) -> ExtractionResult:
    """Replay ``edges`` (time-sorted) and emit one choice per wedge-closing new edge.

    When a new edge closes wedges through several intermediaries, one is
    drawn uniformly with the seeded generator.  Choice sets with fewer than
    two candidates are skipped and counted.
    """
    rng = np.random.default_rng(seed)
    state = GraphState()
    log = []
    skipped = 0
    repeats = 0
    for e in edges:
        u, w, t = e.src, e.dst, e.timestamp
        if u == w:
            continue
        if state.has_edge(u, w):
            repeats += 1
        elif u in state and w in state:
            intermediaries = sorted(state.out[u] & state.inn[w])
            if intermediaries:
                v = intermediaries[rng.integers(len(intermediaries))]
                candidates = sorted(state.out[v] - state.out[u] - {u})
                if len(candidates) < 2:
                    skipped += 1
                else:
                    log.append(ClosureChoice(u, v, w, candidates, _candidate_features(u, candidates, state, t), t))
        state.add_edge(u, w, t)
    return ExtractionResult(_to_dataset(log), log, skipped, repeats)


# --------------------------------------------------------------------------
# synthetic networks


@dataclass(frozen=True)
class SyntheticConfig:
    n_nodes: int = 1000
    closure_prob: float = 0.1
    target_closures: int = 50_000
    poisson_rate: float = 5.0
    model: object = field(default_factory=lambda: MNLParams(SYNTHETIC_THETA))
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if not 0 < self.closure_prob < 1:
            raise ValueError("closure_prob must be in (0, 1)")
        if self.poisson_rate <= 0:
            raise ValueError("poisson_rate must be positive")
        if self.n_nodes < 3:
            raise ValueError("need at least three nodes")
        if not isinstance(self.model, (MNLParams, LCLParams)) or self.model.d != len(FEATURE_NAMES):
            raise ValueError("generator model must be an MNL or LCL over the six network features")


def synthetic_mnl_config(**kw) -> SyntheticConfig:
    return SyntheticConfig(model=MNLParams(SYNTHETIC_THETA), **kw)


def synthetic_lcl_config(**kw) -> SyntheticConfig:
    return SyntheticConfig(model=LCLParams(SYNTHETIC_THETA, SYNTHETIC_A), **kw)


@dataclass
class SyntheticResult:
    edges: list[TemporalEdge]
    dataset: ChoiceDataset | None
    log: list[ClosureChoice]
    closures: int
    steps: int
    forced_closures: int


def _set_probabilities(model, feats):
    if isinstance(model, LCLParams):
        pref = context_adjusted_preferences(model.theta, model.A, feats.mean(axis=0))
    else:
        pref = model.theta
    util = feats @ pref
    p = np.exp(util - util.max())
    return p / p.sum()


def generate_synthetic(config: SyntheticConfig) -> SyntheticResult:
    """Grow a network by random edges and model-driven triangle closures.

    Each step either adds a uniformly random directed edge or, with
    probability ``closure_prob``, picks a random node ``u`` and an
    out-neighbor ``v`` that still has out-neighbors ``u`` is not linked to,
    and lets the model choose which of them ``u`` links to.  If ``u`` has no
    such wedge a random edge is added instead.  Closures with a single
    candidate happen but are not recorded as observations.
    """
    rng = np.random.default_rng(config.seed)
    n = config.n_nodes
    state = GraphState(range(n))
    max_steps = config.max_steps if config.max_steps is not None else 1000 * max(config.target_closures, 1)
    edges = []
    log = []
    closures = forced = steps = 0
    t = 0
    while closures < config.target_closures:
        if steps >= max_steps:
            logger.warning("stopped after %d steps with %d closures", steps, closures)
            break
        steps += 1
        t += int(rng.poisson(config.poisson_rate))
        edge = None
        if rng.random() < config.closure_prob:
            u = int(rng.integers(n))
            out_u = state.out[u]
            blocked = out_u | {u}
            valid = [v for v in sorted(out_u) if not state.out[v] <= blocked]
            if valid:
                v = valid[rng.integers(len(valid))]
                candidates = sorted(state.out[v] - out_u - {u})
                closures += 1
                if len(candidates) == 1:
                    forced += 1
                    w = candidates[0]
                else:
                    feats = _candidate_features(u, candidates, state, t)
                    probs = _set_probabilities(config.model, feats)
                    w = candidates[int(rng.choice(len(candidates), p=probs))]
                    log.append(ClosureChoice(u, v, w, candidates, feats, t))
                edge = TemporalEdge(u, w, t)
        if edge is None:
            u = int(rng.integers(n))
            w = int(rng.integers(n - 1))
            if w >= u:
                w += 1
            edge = TemporalEdge(u, w, t)
        state.add_edge(edge.src, edge.dst, edge.timestamp)
        edges.append(edge)
    return SyntheticResult(edges, _to_dataset(log), log, closures, steps, forced)


def write_closure_log(log, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in log:
            fh.write(json.dumps(c.to_json()) + "\n")
