"""Filtering, ordering and backtracking enumeration with pluggable candidate ranking."""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .euler import SequenceTemplate, serialize
from .graph import LabeledGraph
from .model import NavigatorModel, VocabularyError

MODES = ("baseline", "neugn", "oracle")


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class Termination:
    kind: str = "all"  # all | first | time | count
    value: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "Termination":
        text = text.strip()
        if text in ("all", "first"):
            return cls(text)
        kind, sep, raw = text.partition(":")
        if not sep or kind not in ("time", "count"):
            raise ValueError(f"bad termination policy {text!r}; use all, first, time:<s> or count:<n>")
        value = float(raw) if kind == "time" else int(raw)
        if value <= 0:
            raise ValueError(f"termination budget must be positive, got {raw}")
        return cls(kind, value)

    def __str__(self):
        if self.kind in ("all", "first"):
            return self.kind
        return f"{self.kind}:{self.value:g}"


@dataclass(frozen=True)
class EngineConfig:
    mode: str = "baseline"
    navigation_depth: int = 10
    termination: Termination = Termination()
    batching: bool = True
    batch_size: int = 16
    step_budget: int | None = None
    record_tree: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.navigation_depth < 0:
            raise ValueError("navigation_depth must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.step_budget is not None and self.step_budget < 1:
            raise ValueError("step_budget must be positive")


@dataclass
class EnumerationStats:
    extensions: int = 0
    matches: int = 0
    first_match_steps: int | None = None
    elapsed: float = 0.0
    nav_calls: int = 0
    nav_sequences: int = 0
    nav_seconds: float = 0.0
    status: str = "running"
    visited: set | None = None

    @property
    def no_match(self) -> bool:
        return self.first_match_steps is None

    @property
    def fms(self) -> int:
        """Steps to the first match; total extensions when none was found."""
        return self.extensions if self.first_match_steps is None else self.first_match_steps


@dataclass
class RankedCandidates:
    vertices: list
    conf: list
    mode: str = "baseline"


@dataclass
class MatchingOrder:
    phi: list
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index = {u: i for i, u in enumerate(self.phi)}


@dataclass
class MatchState:
    mapping: list  # data vertex per query vertex, -1 when unmatched
    used: set
    depth: int = 0

    @classmethod
    def empty(cls, n: int):
        return cls([-1] * n, set(), 0)


# -- filtering and ordering -------------------------------------------------


def neighbor_label_counts(g: LabeledGraph, v: int) -> Counter:
    return Counter(g.labels[w] for w in g.adjacency[v])


def filter_nodes(q: LabeledGraph, g: LabeledGraph) -> list[list[int]]:
    """Label + degree + neighbour-label-frequency filter; C[u] is sorted."""
    by_label: dict[int, list[int]] = {}
    for v, lab in enumerate(g.labels):
        by_label.setdefault(lab, []).append(v)
    nlf_cache: dict[int, Counter] = {}
    out = []
    for u in range(q.vertex_count):
        need = neighbor_label_counts(q, u)
        du = q.degree(u)
        keep = []
        for v in by_label.get(q.labels[u], []):
            if g.degree(v) < du:
                continue
            have = nlf_cache.get(v)
            if have is None:
                have = nlf_cache[v] = neighbor_label_counts(g, v)
            if all(have[lab] >= cnt for lab, cnt in need.items()):
                keep.append(v)
        out.append(keep)
    return out


def generate_order(q: LabeledGraph, g: LabeledGraph, cands) -> MatchingOrder:
    """Greedy connected order by smallest |C(u)|, then higher degree, then smaller id."""
    n = q.vertex_count
    if n == 0:
        return MatchingOrder([])

    def key(u):
        return (len(cands[u]), -q.degree(u), u)

    phi = [min(range(n), key=key)]
    placed = set(phi)
    frontier = set(q.adjacency[phi[0]])
    while len(phi) < n:
        pool = frontier - placed
        if not pool:
            pool = set(range(n)) - placed  # disconnected query
        u = min(pool, key=key)
        phi.append(u)
        placed.add(u)
        frontier.update(q.adjacency[u])
    return MatchingOrder(phi)


def backward_neighbors(q: LabeledGraph, order: MatchingOrder) -> list[list[int]]:
    return [[w for w in q.adjacency[u] if order.index[w] < i] for i, u in enumerate(order.phi)]


def compute_local_candidates(q, g, cands, order: MatchingOrder, state: MatchState, _back=None, _csets=None):
    """Unused members of C(u) adjacent to the images of u's matched neighbours, ascending."""
    u = order.phi[state.depth]
    back = _back[state.depth] if _back is not None else [w for w in q.adjacency[u] if state.mapping[w] >= 0]
    used = state.used
    if not back:
        return [v for v in cands[u] if v not in used]
    cset = _csets[u] if _csets is not None else set(cands[u])
    images = [state.mapping[w] for w in back]
    pivot = min(images, key=g.degree)
    others = [g.neighbor_set(x) for x in images if x != pivot]
    return [
        v for v in g.adjacency[pivot]
        if v in cset and v not in used and all(v in s for s in others)
    ]


def conf_and_sort(candidates, P, mode: str = "neugn") -> RankedCandidates:
    """Conf(c) = #{c' in candidates : P(c) > P(c')}; sort by Conf desc, then id asc."""
    cand = np.asarray(candidates, dtype=np.int64)
    scores = np.asarray(P)[cand]
    conf = np.searchsorted(np.sort(scores), scores, side="left")
    order = np.lexsort((cand, -conf))
    return RankedCandidates(cand[order].tolist(), conf[order].tolist(), mode)


# -- enumeration ------------------------------------------------------------


class _Stop(Exception):
    pass


class Enumerator:
    """Depth-first enumeration of one query. Iterate to stream matches; read ``stats`` after."""

    def __init__(self, q: LabeledGraph, g: LabeledGraph, cfg: EngineConfig, model: NavigatorModel | None = None):
        if cfg.mode == "neugn" and model is None:
            raise ValueError("neugn mode needs a model")
        self.q, self.g, self.cfg, self.model = q, g, cfg, model
        self.stats = EnumerationStats(visited=set() if cfg.record_tree else None)
        self._t0 = time.perf_counter()
        self.cands = filter_nodes(q, g)
        self.order = generate_order(q, g, self.cands)
        self.back = backward_neighbors(q, self.order)
        self.csets = [set(c) for c in self.cands]
        self.cache: dict[tuple, np.ndarray] = {}
        self.template = None
        if cfg.mode == "neugn" and min(cfg.navigation_depth, q.vertex_count) > 0:
            self._prepare_navigator()

    def _prepare_navigator(self):
        model = self.model
        if model.config.vocab != self.g.vertex_count:
            raise VocabularyError(
                f"model vocabulary has {model.config.vocab} vertices but the data graph has {self.g.vertex_count}"
            )
        t = time.perf_counter()
        self.template = SequenceTemplate(serialize(self.q, 0, model.config.window))
        self.sig = model.extract_forward([self.q])[0][0]
        self.stats.nav_seconds += time.perf_counter() - t

    # -- navigator --------------------------------------------------------

    def _forward(self, token_rows: list[np.ndarray]) -> np.ndarray:
        t = time.perf_counter()
        tokens = np.stack(token_rows)
        bsz, l = tokens.shape
        positions = np.broadcast_to(self.template.positions, (bsz, l))
        sig = np.broadcast_to(self.sig, (bsz, self.sig.shape[0]))
        P = self.model.probabilities(tokens, positions, np.full(bsz, l), sig)
        self.stats.nav_calls += 1
        self.stats.nav_sequences += bsz
        self.stats.nav_seconds += time.perf_counter() - t
        return P

    def _partial(self, depth: int) -> dict:
        phi = self.order.phi
        return {phi[j]: self.mapping[phi[j]] for j in range(depth)}

    def _key(self, depth: int) -> tuple:
        phi = self.order.phi
        return tuple(self.mapping[phi[j]] for j in range(depth))

    def distribution(self, depth: int) -> np.ndarray:
        """P for the state with φ[:depth] matched and CLS on φ[depth]."""
        hit = self.cache.pop(self._key(depth), None)
        if hit is not None:
            return hit
        tokens = self.template.tokens_for(self._partial(depth), self.order.phi[depth])
        return self._forward([tokens])[0]

    def batch_precompute(self, depth: int, children: list[int]) -> None:
        """Evaluate the child states φ[depth] -> c for every c in one grouped pass.

        Each child sequence fills φ[depth] with c and puts CLS on φ[depth + 1];
        results are cached under the child's partial match.
        """
        phi = self.order.phi
        base = self.template.tokens_for(self._partial(depth), None)
        prefix = self._key(depth)
        rows = [self.template.advance(base, phi[depth], c, phi[depth + 1]) for c in children]
        P = self._forward(rows)
        for c, p in zip(children, P):
            self.cache[prefix + (c,)] = p

    def _navigated(self, depth: int) -> bool:
        return self.template is not None and depth < self.cfg.navigation_depth

    def rank(self, depth: int, candidates: list[int]) -> list[int]:
        mode = self.cfg.mode
        if mode == "oracle":
            return self.oracle_rank(depth, candidates).vertices
        if mode == "neugn" and self._navigated(depth):
            if len(candidates) <= 1:
                self.cache.pop(self._key(depth), None)
                return candidates
            return conf_and_sort(candidates, self.distribution(depth)).vertices
        return candidates

    # -- oracle -----------------------------------------------------------

    def _local(self, depth: int) -> list[int]:
        state = MatchState(self.mapping, self.used, depth)
        return compute_local_candidates(self.q, self.g, self.cands, self.order, state, self.back, self.csets)

    def _extendable(self, depth: int) -> bool:
        if depth == self.q.vertex_count:
            return True
        u = self.order.phi[depth]
        for v in self._local(depth):
            self.mapping[u] = v
            self.used.add(v)
            ok = self._extendable(depth + 1)
            self.used.discard(v)
            self.mapping[u] = -1
            if ok:
                return True
        return False

    def oracle_rank(self, depth: int, candidates: list[int]) -> RankedCandidates:
        """Extendable children first (score 1), others after (score 0)."""
        u = self.order.phi[depth]
        scores = []
        for v in candidates:
            self.mapping[u] = v
            self.used.add(v)
            scores.append(1 if self._extendable(depth + 1) else 0)
            self.used.discard(v)
            self.mapping[u] = -1
        order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i]))
        return RankedCandidates([candidates[i] for i in order], [scores[i] for i in order], "oracle")

    # -- search -----------------------------------------------------------

    def _expand(self, depth: int) -> list[int]:
        return self.rank(depth, self._local(depth))

    def __iter__(self):
        n = self.q.vertex_count
        phi = self.order.phi
        cfg = self.cfg
        stats = self.stats
        term = cfg.termination
        deadline = self._t0 + term.value if term.kind == "time" else None
        self.mapping = [-1] * n
        self.used = set()
        if n == 0:
            stats.status = "complete"
            stats.elapsed = time.perf_counter() - self._t0
            return
        batching = cfg.mode == "neugn" and cfg.batching and self.template is not None
        try:
            frames = [self._expand(0)]
            pos = [0]
            while frames:
                d = len(frames) - 1
                u = phi[d]
                if self.mapping[u] >= 0:
                    self.used.discard(self.mapping[u])
                    self.mapping[u] = -1
                if pos[d] == len(frames[d]):
                    frames.pop()
                    pos.pop()
                    continue
                i = pos[d]
                v = frames[d][i]
                pos[d] = i + 1
                self.mapping[u] = v
                self.used.add(v)
                stats.extensions += 1
                if stats.visited is not None:
                    stats.visited.add(self._key(d + 1))
                if d + 1 == n:
                    stats.matches += 1
                    if stats.first_match_steps is None:
                        stats.first_match_steps = stats.extensions
                    yield tuple((w, self.mapping[w]) for w in phi)
                    if term.kind == "first" or (term.kind == "count" and stats.matches >= term.value):
                        raise _Stop(term.kind)
                else:
                    if batching and self._navigated(d + 1) and self._key(d + 1) not in self.cache:
                        self.batch_precompute(d, frames[d][i : i + cfg.batch_size])
                    frames.append(self._expand(d + 1))
                    pos.append(0)
                if deadline is not None and time.perf_counter() >= deadline:
                    raise _Stop("time")
                if cfg.step_budget is not None and stats.extensions >= cfg.step_budget:
                    raise _Stop("steps")
            stats.status = "complete"
        except _Stop as stop:
            stats.status = stop.args[0]
        finally:
            stats.elapsed = time.perf_counter() - self._t0
            if stats.status == "running":
                stats.status = "aborted"


def enumerate_matches(q, g, cfg: EngineConfig, model=None) -> Enumerator:
    return Enumerator(q, g, cfg, model)


def run_query(q, g, cfg: EngineConfig, model=None):
    """Drain an enumeration; returns ``(matches, stats)``."""
    en = Enumerator(q, g, cfg, model)
    matches = list(en)
    return matches, en.stats


def measure_mps(q, g, cfg: EngineConfig, model=None) -> tuple[float, EnumerationStats]:
    if cfg.termination.kind != "time":
        raise ValueError("measure_mps needs a time termination policy")
    _, stats = run_query(q, g, cfg, model)
    return (stats.matches / stats.elapsed if stats.elapsed > 0 else 0.0), stats


# -- output formats ---------------------------------------------------------

METRICS_HEADER = "query_id,mode,fms,total_steps,matches,elapsed_ms,nav_calls,nav_ms"


def metrics_row(query_id, mode: str, stats: EnumerationStats, timing: bool = True) -> str:
    elapsed = f"{stats.elapsed * 1e3:.3f}" if timing else "0"
    nav = f"{stats.nav_seconds * 1e3:.3f}" if timing else "0"
    return f"{query_id},{mode},{stats.fms},{stats.extensions},{stats.matches},{elapsed},{stats.nav_calls},{nav}"


def format_match(m) -> str:
    return "M " + " ".join(f"{u}:{v}" for u, v in m)
