"""Repetition-code nesting, chain embedding, and majority-vote decoding.

Three layers of problem:

* logical  -- the Boltzmann machine being trained (N variables),
* code     -- each logical variable copied C times, copies bound by a
              ferromagnetic penalty gamma1,
* physical -- each code variable replaced by a chain of hardware qubits on a
              Chimera-style graph, chains bound by a penalty gamma2.

Decoding runs the two majority votes in reverse: chain -> code value,
code group -> logical value, with seeded fair coins on exact ties.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import rng as _rng
from .errors import CapacityError, DimensionError, DomainError
from .ising import H_LIMIT, J_LIMIT, IsingProblem, SampleSet


def _check_penalty(name: str, value: float):
    if not 0.0 < value <= 1.0:
        raise DomainError(f"{name} must lie in (0, 1], got {value}")


@dataclass(frozen=True)
class NestingConfig:
    """Code length C (>= 1) and the code penalty gamma1 in (0, 1]."""

    C: int
    gamma1: float = 1.0

    def __post_init__(self):
        if self.C < 1:
            raise DomainError(f"nesting level must be >= 1, got {self.C}")
        _check_penalty("gamma1", self.gamma1)


@dataclass(frozen=True)
class NestedProblem:
    """Code-level Ising instance over C*N code variables.

    Code variable ids are (i, c) -> i*C + c for logical i and copy c; all
    copies of logical i form group i. ``base`` carries the instance values,
    including the -gamma1 intra-group couplers.
    """

    base: IsingProblem
    logical: IsingProblem
    config: NestingConfig

    @property
    def C(self) -> int:
        return self.config.C

    @property
    def logical_n(self) -> int:
        return self.logical.n

    def code_index(self, i: int, c: int) -> int:
        if not (0 <= i < self.logical_n and 0 <= c < self.C):
            raise DomainError(f"no code variable ({i},{c})")
        return i * self.C + c

    def group_of(self, code_id: int) -> int:
        return code_id // self.C

    @cached_property
    def groups(self) -> tuple[tuple[int, ...], ...]:
        C = self.C
        return tuple(
            tuple(range(i * C, (i + 1) * C)) for i in range(self.logical_n)
        )


def nest(logical: IsingProblem, cfg: NestingConfig) -> NestedProblem:
    """Copy the problem into a length-C repetition code.

    Cross-group couplers replicate the logical coupler C*C times at its
    original value; fields are scaled by C; each group gets C(C-1)/2
    couplers of -gamma1 binding its copies.
    """
    C = cfg.C
    n_code = logical.n * C
    h = {}
    for i, v in logical.h.items():
        for c in range(C):
            h[i * C + c] = C * v
    j: dict[tuple[int, int], float] = {}
    for (a, b), v in logical.j.items():
        for ca in range(C):
            for cb in range(C):
                j[(a * C + ca, b * C + cb)] = v
    if C > 1:
        for i in range(logical.n):
            for ca in range(C):
                for cb in range(ca + 1, C):
                    j[(i * C + ca, i * C + cb)] = -cfg.gamma1
    base = IsingProblem(n=n_code, h=h, j=j)
    return NestedProblem(base=base, logical=logical, config=cfg)


# -- hardware graph ------------------------------------------------------------


@dataclass(frozen=True)
class HardwareGraph:
    """Chimera(rows, cols, k): a grid of K_{k,k} cells.

    Node id = (r*cols + c) * 2k + u*k + i, with u=0 the "vertical" shore
    (coupled to the cells above/below) and u=1 the "horizontal" shore
    (coupled left/right). ``inactive`` nodes keep their ids but carry no
    edges, mirroring real devices with dead qubits.
    """

    rows: int
    cols: int
    k: int
    inactive: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if min(self.rows, self.cols, self.k) < 1:
            raise DomainError("rows, cols, k must all be >= 1")
        object.__setattr__(self, "inactive", frozenset(int(x) for x in self.inactive))
        for x in self.inactive:
            if not 0 <= x < self.n_nodes:
                raise DomainError(f"inactive node {x} out of range")

    @property
    def n_nodes(self) -> int:
        return self.rows * self.cols * 2 * self.k

    def node(self, r: int, c: int, u: int, i: int) -> int:
        return ((r * self.cols) + c) * 2 * self.k + u * self.k + i

    def coords(self, node: int) -> tuple[int, int, int, int]:
        cell, rem = divmod(node, 2 * self.k)
        r, c = divmod(cell, self.cols)
        u, i = divmod(rem, self.k)
        return r, c, u, i

    def is_active(self, node: int) -> bool:
        return 0 <= node < self.n_nodes and node not in self.inactive

    @cached_property
    def edges(self) -> frozenset[tuple[int, int]]:
        out = set()

        def add(p, q):
            if self.is_active(p) and self.is_active(q):
                out.add((p, q) if p < q else (q, p))

        for r in range(self.rows):
            for c in range(self.cols):
                for i in range(self.k):
                    for i2 in range(self.k):
                        add(self.node(r, c, 0, i), self.node(r, c, 1, i2))
                    if r + 1 < self.rows:
                        add(self.node(r, c, 0, i), self.node(r + 1, c, 0, i))
                    if c + 1 < self.cols:
                        add(self.node(r, c, 1, i), self.node(r, c + 1, 1, i))
        return frozenset(out)

    def has_edge(self, p: int, q: int) -> bool:
        return ((p, q) if p < q else (q, p)) in self.edges

    @property
    def n_active(self) -> int:
        return self.n_nodes - len(self.inactive)


def chimera(rows: int, cols: int, k: int, inactive: Iterable[int] = ()) -> HardwareGraph:
    return HardwareGraph(rows=rows, cols=cols, k=k, inactive=frozenset(inactive))


# -- embedding -----------------------------------------------------------------


@dataclass(frozen=True)
class Embedding:
    """Map code variable -> ordered chain of hardware nodes.

    ``node_order`` fixes the dense column layout of physical sample vectors:
    column p of a physical SampleSet is hardware node node_order[p].
    ``supports[(a, b)]`` lists the physical edges carrying nested coupler
    (a, b); ``intra_edges`` are the chain-internal edges that receive -gamma2.
    """

    chains: Mapping[int, tuple[int, ...]]
    gamma2: float
    node_order: tuple[int, ...]
    supports: Mapping[tuple[int, int], tuple[tuple[int, int], ...]]
    intra_edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        _check_penalty("gamma2", self.gamma2)
        seen: set[int] = set()
        for cid, chain in self.chains.items():
            if not chain:
                raise DomainError(f"chain for code variable {cid} is empty")
            overlap = seen.intersection(chain)
            if overlap:
                raise DomainError(f"chains overlap on nodes {sorted(overlap)[:4]}")
            seen.update(chain)

    @property
    def L(self) -> int:
        return max(len(c) for c in self.chains.values())

    @property
    def n_physical(self) -> int:
        return len(self.node_order)

    @cached_property
    def dense_index(self) -> dict[int, int]:
        return {node: p for p, node in enumerate(self.node_order)}

    @cached_property
    def dense_chains(self) -> tuple[tuple[int, ...], ...]:
        """Chains as dense column indices, ordered by code variable id."""
        idx = self.dense_index
        return tuple(
            tuple(idx[q] for q in self.chains[cid]) for cid in sorted(self.chains)
        )


def _triangle_chain(hw: HardwareGraph, t: int, b: int, r0: int, c0: int) -> tuple[int, ...]:
    """Chain for clique member t in the standard triangular layout.

    Member t = a*k + i occupies a vertical run in grid column a (rows 0..a)
    and a horizontal run in grid row a (columns a..b-1), all at shore index i,
    offset by (r0, c0). The two runs meet in diagonal cell (a, a) through an
    in-cell coupler, so the chain induces a path of b+1 nodes.
    """
    a, i = divmod(t, hw.k)
    vert = [hw.node(r0 + r, c0 + a, 0, i) for r in range(a + 1)]
    horiz = [hw.node(r0 + a, c0 + c, 1, i) for c in range(a, b)]
    return tuple(vert + horiz)


def _clique_embedding_chains(
    hw: HardwareGraph, n_nodes: int
) -> dict[int, tuple[int, ...]]:
    """Deterministic clique embedding of K_{n_nodes}; scans grid offsets to
    dodge inactive hardware nodes."""
    b = -(-n_nodes // hw.k)  # blocks needed
    if b > hw.rows or b > hw.cols:
        raise CapacityError(
            f"K_{n_nodes} needs a {b}x{b} cell block; graph is {hw.rows}x{hw.cols}"
        )
    for r0 in range(hw.rows - b + 1):
        for c0 in range(hw.cols - b + 1):
            chains = {t: _triangle_chain(hw, t, b, r0, c0) for t in range(n_nodes)}
            if all(hw.is_active(q) for ch in chains.values() for q in ch):
                return chains
    raise CapacityError(
        f"no {b}x{b} offset placement avoids the inactive nodes for K_{n_nodes}"
    )


def _chain_internal_edges(hw: HardwareGraph, chain: Sequence[int]) -> list[tuple[int, int]]:
    members = set(chain)
    out = []
    for q in chain:
        for p in members:
            if p > q and hw.has_edge(q, p):
                out.append((q, p))
    return out


def _connected(hw: HardwareGraph, chain: Sequence[int]) -> bool:
    if len(chain) == 1:
        return hw.is_active(chain[0])
    members = set(chain)
    seen = {chain[0]}
    frontier = [chain[0]]
    while frontier:
        q = frontier.pop()
        for p in members - seen:
            if hw.has_edge(q, p):
                seen.add(p)
                frontier.append(p)
    return seen == members


def minor_embed(
    nested: NestedProblem,
    hw: HardwareGraph,
    gamma2: float,
    chains: Mapping[int, Sequence[int]] | None = None,
) -> tuple[IsingProblem, Embedding]:
    """Embed the nested problem onto hardware.

    Without ``chains`` a deterministic clique embedding is constructed (the
    nested graph of a fully connected model is complete). A user-supplied
    chain map is validated instead: disjoint, connected, every nested edge
    supported.

    Values: each nested field splits equally along its chain; each nested
    coupler splits equally across the physical edges available between the
    two chains; every intra-chain edge gets -gamma2. The result is tagged
    with hardware limits; values beyond |h|<=2, |J|<=1 are clipped with a
    warning.
    """
    _check_penalty("gamma2", gamma2)
    n_code = nested.base.n
    if chains is None:
        chain_map = _clique_embedding_chains(hw, n_code)
    else:
        chain_map = {int(k): tuple(int(q) for q in v) for k, v in chains.items()}
        if sorted(chain_map) != list(range(n_code)):
            raise DomainError(
                f"user chains must cover code variables 0..{n_code - 1} exactly"
            )
        seen: set[int] = set()
        for cid, chain in chain_map.items():
            for q in chain:
                if not hw.is_active(q):
                    raise DomainError(f"chain {cid} uses inactive/bogus node {q}")
            overlap = seen.intersection(chain)
            if overlap:
                raise DomainError(f"chains overlap on nodes {sorted(overlap)[:4]}")
            seen.update(chain)
            if not _connected(hw, chain):
                raise DomainError(f"chain {cid} does not induce a connected subgraph")

    node_order = tuple(q for cid in sorted(chain_map) for q in chain_map[cid])
    dense = {q: p for p, q in enumerate(node_order)}
    owner = {q: cid for cid, chain in chain_map.items() for q in chain}

    h: dict[int, float] = {}
    for cid in sorted(chain_map):
        chain = chain_map[cid]
        share = nested.base.h.get(cid, 0.0) / len(chain)
        if share != 0.0:
            for q in chain:
                h[dense[q]] = share

    j: dict[tuple[int, int], float] = {}
    intra: list[tuple[int, int]] = []
    supports: dict[tuple[int, int], list[tuple[int, int]]] = {
        pair: [] for pair in nested.base.j
    }
    for cid in sorted(chain_map):
        for q, p in _chain_internal_edges(hw, chain_map[cid]):
            dq, dp = dense[q], dense[p]
            key = (dq, dp) if dq < dp else (dp, dq)
            j[key] = -gamma2
            intra.append(key)
    for q, p in hw.edges:
        cq, cp = owner.get(q), owner.get(p)
        if cq is None or cp is None or cq == cp:
            continue
        pair = (cq, cp) if cq < cp else (cp, cq)
        if pair in supports:
            dq, dp = dense[q], dense[p]
            supports[pair].append((dq, dp) if dq < dp else (dp, dq))

    missing = [pair for pair, edges in supports.items() if not edges]
    if missing:
        raise CapacityError(
            f"{len(missing)} nested couplers have no supporting physical edge, "
            f"first: {missing[0]}"
        )
    for pair, edges in supports.items():
        share = nested.base.j[pair] / len(edges)
        for e in edges:
            j[e] = share

    clipped = 0
    for i, v in list(h.items()):
        if abs(v) > H_LIMIT:
            h[i] = H_LIMIT if v > 0 else -H_LIMIT
            clipped += 1
    for e, v in list(j.items()):
        if abs(v) > J_LIMIT:
            j[e] = J_LIMIT if v > 0 else -J_LIMIT
            clipped += 1
    if clipped:
        warnings.warn(
            f"{clipped} physical values exceeded hardware limits and were clipped",
            stacklevel=2,
        )

    physical = IsingProblem(
        n=len(node_order), h=h, j=j, hardware_limits=True
    )
    emb = Embedding(
        chains={cid: tuple(chain_map[cid]) for cid in chain_map},
        gamma2=gamma2,
        node_order=node_order,
        supports={p: tuple(es) for p, es in supports.items()},
        intra_edges=tuple(intra),
    )
    return physical, emb


# -- decoding ------------------------------------------------------------------


@dataclass(frozen=True)
class DecodePolicy:
    """How physical samples become logical samples.

    majority_vote: chain -> code by sign of the chain sum, code group ->
    logical likewise; exact ties become fair coins drawn from tie_seed.
    discard_broken: samples containing any non-unanimous chain are dropped
    before the code -> logical vote.
    """

    mode: str = "majority_vote"
    tie_seed: int = 0

    MODES = ("majority_vote", "discard_broken")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise DomainError(f"mode must be one of {self.MODES}")


@dataclass(frozen=True)
class ChainBreakStats:
    """Per-decode bookkeeping: how many samples had all chains unanimous."""

    n_samples: int
    n_unbroken: int
    n_discarded: int
    broken_chain_rate: float  # broken (chain, sample) pairs / total pairs

    @property
    def unbroken_fraction(self) -> float:
        return self.n_unbroken / self.n_samples if self.n_samples else 0.0


def decode(
    samples: SampleSet,
    emb: Embedding,
    nested: NestedProblem,
    policy: DecodePolicy | None = None,
) -> tuple[SampleSet, ChainBreakStats]:
    """Physical samples -> logical samples plus chain-break statistics.

    Ties are resolved by fair coins from a stream derived from
    (tie_seed, state rank); the rank is the state's position in the sample
    set's canonical order, so decoding is deterministic under any worker
    schedule. Each copy of a duplicated state draws fresh coins.
    """
    policy = policy or DecodePolicy()
    if samples.width != emb.n_physical:
        raise DimensionError(
            f"sample width {samples.width} != physical qubit count {emb.n_physical}"
        )
    C = nested.C
    n_logical = nested.logical_n
    dense_chains = emb.dense_chains

    states = samples.states.astype(np.int64)
    n_states = len(states)
    # chain sums: (n_states, n_code)
    chain_sums = np.empty((n_states, len(dense_chains)), dtype=np.int64)
    for cid, cols in enumerate(dense_chains):
        chain_sums[:, cid] = states[:, cols].sum(axis=1)
    chain_lens = np.array([len(c) for c in dense_chains])
    broken = np.abs(chain_sums) != chain_lens  # non-unanimous chain

    total_pairs = samples.n_total * len(dense_chains)
    broken_pairs = int((samples.counts[:, None] * broken).sum())

    unbroken_state = ~broken.any(axis=1)
    n_unbroken = int(samples.counts[unbroken_state].sum())
    n_total = samples.n_total

    if policy.mode == "discard_broken":
        keep = unbroken_state
        states = states[keep]
        counts = samples.counts[keep]
        chain_sums = chain_sums[keep]
        ranks = np.nonzero(keep)[0]
        n_discarded = n_total - int(counts.sum())
    else:
        counts = samples.counts
        ranks = np.arange(n_states)
        n_discarded = 0

    rows: list[np.ndarray] = []
    row_counts: list[int] = []
    group_cols = np.arange(n_logical * C).reshape(n_logical, C)
    for s_i in range(len(chain_sums)):
        code_sign = np.sign(chain_sums[s_i])
        logical_base = np.sign(code_sign[group_cols].sum(axis=1))
        chain_ties = np.nonzero(code_sign == 0)[0]
        count = int(counts[s_i])
        if len(chain_ties) == 0 and not np.any(logical_base == 0):
            rows.append(logical_base.astype(np.int8))
            row_counts.append(count)
            continue
        # ties somewhere: draw per-copy coins from the state's own stream
        gen = _rng.spawn(policy.tie_seed, "decode", int(ranks[s_i]))
        for _ in range(count):
            code = code_sign.copy()
            if len(chain_ties):
                code[chain_ties] = gen.choice([-1, 1], size=len(chain_ties))
            logical = np.sign(code[group_cols].sum(axis=1))
            group_ties = np.nonzero(logical == 0)[0]
            if len(group_ties):
                logical[group_ties] = gen.choice([-1, 1], size=len(group_ties))
            rows.append(logical.astype(np.int8))
            row_counts.append(1)

    stats = ChainBreakStats(
        n_samples=n_total,
        n_unbroken=n_unbroken,
        n_discarded=n_discarded,
        broken_chain_rate=(broken_pairs / total_pairs) if total_pairs else 0.0,
    )
    if not rows:
        logical_set = SampleSet(
            states=np.zeros((0, n_logical), dtype=np.int8),
            counts=np.zeros(0, dtype=np.int64),
            level="logical",
        )
        return logical_set, stats
    logical_set = SampleSet.from_counts(
        np.array(rows, dtype=np.int8), np.array(row_counts), level="logical"
    )
    return logical_set, stats


# -- resource accounting ---------------------------------------------------------


@dataclass(frozen=True)
class ResourceCount:
    """Qubit accounting for one nesting level."""

    lower_bound: int
    exact_qubits: int | None = None
    exact_couplers: int | None = None


def resource_count(C: int, N: int, L: int, embedding: Embedding | None = None) -> ResourceCount:
    """Lower-bound qubit count C*N*(C*N-1)/2 + C*N*(L-1), plus exact counts
    when a concrete embedding is given."""
    if min(C, N, L) < 1:
        raise DomainError("C, N, L must all be >= 1")
    cn = C * N
    lower = cn * (cn - 1) // 2 + cn * (L - 1)
    if embedding is None:
        return ResourceCount(lower_bound=lower)
    return ResourceCount(
        lower_bound=lower,
        exact_qubits=embedding.n_physical,
        exact_couplers=len(embedding.intra_edges)
        + sum(len(v) for v in embedding.supports.values()),
    )


def replica_count(C: int, N: int, k: int = 4) -> int:
    """Replicas of the unnested pipeline that use about the same number of
    physical qubits as nesting level C.

    Uses the qubit totals of the deterministic clique embedding:
    level C needs C*N chains of length ceil(C*N/k)+1.
    """
    if C < 1 or N < 1:
        raise DomainError("C and N must be >= 1")

    def qubits(level):
        chains = level * N
        return chains * (-(-chains // k) + 1)

    return max(1, round(qubits(C) / qubits(1)))


# -- embedding files -------------------------------------------------------------
#
# one line per code variable: "code_id: p1 p2 p3 ...", 0-based hardware node
# ids, '#' starts a comment.


def embedding_to_text(emb: Embedding) -> str:
    lines = [f"# gamma2 = {emb.gamma2!r}"]
    for cid in sorted(emb.chains):
        chain = " ".join(str(q) for q in emb.chains[cid])
        lines.append(f"{cid}: {chain}")
    return "\n".join(lines) + "\n"


def chains_from_text(text: str) -> dict[int, tuple[int, ...]]:
    chains: dict[int, tuple[int, ...]] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise DomainError(f"bad embedding line {raw!r}")
        head, tail = line.split(":", 1)
        cid = int(head)
        if cid in chains:
            raise DomainError(f"duplicate chain for code variable {cid}")
        chain = tuple(int(q) for q in tail.split())
        if not chain:
            raise DomainError(f"empty chain for code variable {cid}")
        chains[cid] = chain
    return chains


def write_embedding(emb: Embedding, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(embedding_to_text(emb))


def read_chains(path) -> dict[int, tuple[int, ...]]:
    with open(path, "r", encoding="utf-8") as fh:
        return chains_from_text(fh.read())
