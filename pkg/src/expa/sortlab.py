"""Ground truth for the sorting study.

Permutations are represented as rank tuples: ``perm[i]`` is the rank (0 =
smallest) of the value currently at position ``i``. Positions map to labels
A, B, C, ... in order.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .environments import LABELS

Perm = tuple[int, ...]
Swap = tuple[int, int]

#: Worst-case optimal comparison counts for sorting n items.
OPTIMAL_WORST_COMPARISONS = {1: 0, 2: 1, 3: 3, 4: 5, 5: 7, 6: 10, 7: 13, 8: 16}


class IndeterminateOrder(ValueError):
    """The accumulated comparisons do not pin down a single permutation."""


class ExtractionError(RuntimeError):
    def __init__(self, message: str, perm: Perm | None = None):
        super().__init__(f"{message} (permutation {perm})" if perm is not None else message)
        self.perm = perm


def ranks_of(values: Sequence) -> Perm:
    order = sorted(range(len(values)), key=values.__getitem__)
    ranks = [0] * len(values)
    for r, i in enumerate(order):
        ranks[i] = r
    return tuple(ranks)


def destination(perm: Perm, direction: str = "asc") -> Perm:
    """Position each element has to move to."""
    n = len(perm)
    if direction == "asc":
        return tuple(perm)
    return tuple(n - 1 - r for r in perm)


def count_cycles(mapping: Sequence[int]) -> int:
    seen = [False] * len(mapping)
    cycles = 0
    for i in range(len(mapping)):
        if not seen[i]:
            cycles += 1
            while not seen[i]:
                seen[i] = True
                i = mapping[i]
    return cycles


def min_swap_count(perm: Perm, direction: str = "asc") -> int:
    return len(perm) - count_cycles(destination(perm, direction))


@dataclass
class ComparisonSet:
    """Accumulated comparison outcomes over ``n`` positions.

    ``less`` holds pairs ``(i, j)`` meaning the value at ``i`` is smaller than
    the value at ``j``; queries see the transitive closure.
    """

    n: int
    less: set[tuple[int, int]] = field(default_factory=set)

    def add(self, i: int, j: int, i_less_than_j: bool) -> None:
        pair = (i, j) if i_less_than_j else (j, i)
        if (pair[1], pair[0]) in self.closure():
            raise ValueError(f"comparison {pair} contradicts earlier results")
        self.less.add(pair)

    def closure(self) -> set[tuple[int, int]]:
        rel = set(self.less)
        for k in range(self.n):
            for i in range(self.n):
                if (i, k) in rel:
                    for j in range(self.n):
                        if (k, j) in rel:
                            rel.add((i, j))
        return rel

    def consistent(self, perm: Perm) -> bool:
        return all(perm[i] < perm[j] for i, j in self.less)

    def consistent_perms(self) -> list[Perm]:
        return [p for p in itertools.permutations(range(self.n)) if self.consistent(p)]

    def ranks(self) -> Perm:
        perms = self.consistent_perms()
        if len(perms) != 1:
            raise IndeterminateOrder(f"{len(perms)} permutations remain consistent")
        return perms[0]


def min_swap(order: Perm | ComparisonSet, direction: str = "asc") -> list[Swap]:
    """Shortest transposition sequence that sorts the positions.

    Length is ``n - cycles`` of the position-to-destination map, which is
    minimal: each transposition changes the cycle count by exactly one.
    """
    perm = order.ranks() if isinstance(order, ComparisonSet) else tuple(order)
    dest = list(destination(perm, direction))
    swaps = []
    for i in range(len(dest)):
        while dest[i] != i:
            j = dest[i]
            swaps.append((min(i, j), max(i, j)))
            dest[i], dest[j] = dest[j], dest[i]
    return swaps


def apply_swaps(values: Sequence, swaps: Iterable[Swap]) -> list:
    values = list(values)
    for i, j in swaps:
        values[i], values[j] = values[j], values[i]
    return values


def is_sorted(values: Sequence, direction: str = "asc") -> bool:
    pairs = zip(values, values[1:])
    return all(a < b for a, b in pairs) if direction == "asc" else all(a > b for a, b in pairs)


def bfs_swap_distance(perm: Perm) -> int:
    """Distance to the identity in the Cayley graph generated by all transpositions."""
    target = tuple(range(len(perm)))
    if perm == target:
        return 0
    seen = {perm}
    frontier = deque([(perm, 0)])
    pairs = list(itertools.combinations(range(len(perm)), 2))
    while frontier:
        p, d = frontier.popleft()
        for i, j in pairs:
            q = list(p)
            q[i], q[j] = q[j], q[i]
            q = tuple(q)
            if q == target:
                return d + 1
            if q not in seen:
                seen.add(q)
                frontier.append((q, d + 1))
    raise AssertionError("unreachable")


def optimal_swap_stats(n: int) -> Fraction:
    """Exact mean of ``n - cycles`` over all of S_n."""
    if n > 8:
        raise ValueError("n must be <= 8")
    total = sum(min_swap_count(p) for p in itertools.permutations(range(n)))
    return Fraction(total, math.factorial(n))


# --------------------------------------------------------------------------
# decision trees


@dataclass
class Leaf:
    swaps: tuple[Swap, ...]
    perms: frozenset = frozenset()


@dataclass
class Node:
    i: int
    j: int
    lt: "Node | Leaf | None" = None  # value[i] < value[j]
    gt: "Node | Leaf | None" = None
    perms: frozenset = frozenset()


@dataclass
class DecisionTree:
    n: int
    root: Node | Leaf
    direction: str = "asc"

    def run(self, perm: Perm) -> tuple[list[tuple[int, int, bool]], tuple[Swap, ...]]:
        """Follow the tree for one permutation: (comparisons, leaf swaps)."""
        comps = []
        node = self.root
        while isinstance(node, Node):
            less = perm[node.i] < perm[node.j]
            comps.append((node.i, node.j, less))
            node = node.lt if less else node.gt
            if node is None:
                raise ExtractionError("tree has no branch for this outcome", perm)
        return comps, node.swaps

    def nodes(self) -> list[Node | Leaf]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node is None:
                continue
            out.append(node)
            if isinstance(node, Node):
                stack.extend([node.gt, node.lt])
        return out

    def leaves(self) -> list[Leaf]:
        return [x for x in self.nodes() if isinstance(x, Leaf)]

    def internal(self) -> list[Node]:
        return [x for x in self.nodes() if isinstance(x, Node)]

    def schedule(self) -> dict[Perm, list[tuple[int, int, bool]]]:
        return {p: self.run(p)[0] for leaf in self.leaves() for p in leaf.perms}


def _split(state: frozenset, i: int, j: int) -> tuple[frozenset, frozenset]:
    lt = frozenset(p for p in state if p[i] < p[j])
    return lt, state - lt


@lru_cache(maxsize=None)
def _worst_cost(state: frozenset, n: int) -> int:
    if len(state) <= 1:
        return 0
    bound = math.ceil(math.log2(len(state)))
    best = None
    for i, j in itertools.combinations(range(n), 2):
        lt, gt = _split(state, i, j)
        if not lt or not gt:
            continue
        c = 1 + max(_worst_cost(lt, n), _worst_cost(gt, n))
        if best is None or c < best:
            best = c
            if best == bound:
                break
    return best


@lru_cache(maxsize=None)
def _total_cost(state: frozenset, n: int) -> int:
    """Sum over consistent permutations of the comparisons still needed."""
    if len(state) <= 1:
        return 0
    best = None
    for i, j in itertools.combinations(range(n), 2):
        lt, gt = _split(state, i, j)
        if not lt or not gt:
            continue
        c = len(state) + _total_cost(lt, n) + _total_cost(gt, n)
        if best is None or c < best:
            best = c
    return best


def _best_pairs(state: frozenset, n: int, objective: str) -> list[tuple[int, int]]:
    costs = {}
    for i, j in itertools.combinations(range(n), 2):
        lt, gt = _split(state, i, j)
        if not lt or not gt:
            continue
        if objective == "worst_case":
            costs[(i, j)] = 1 + max(_worst_cost(lt, n), _worst_cost(gt, n))
        else:
            costs[(i, j)] = len(state) + _total_cost(lt, n) + _total_cost(gt, n)
    best = min(costs.values())
    return [pair for pair, c in costs.items() if c == best]


def _build(state: frozenset, n: int, choose, direction: str) -> Node | Leaf:
    if len(state) == 1:
        (perm,) = state
        return Leaf(tuple(min_swap(perm, direction)), state)
    i, j = choose(state)
    lt, gt = _split(state, i, j)
    return Node(i, j, _build(lt, n, choose, direction), _build(gt, n, choose, direction), state)


def all_perms(n: int) -> frozenset:
    return frozenset(itertools.permutations(range(n)))


def optimal_comparison_tree(n: int, objective: str = "worst_case", direction: str = "asc") -> DecisionTree:
    """Exhaustive search over information states (sets of consistent permutations)."""
    if objective not in ("worst_case", "average"):
        raise ValueError(objective)
    if n > 5:
        raise ValueError("exhaustive search is limited to n <= 5")
    root = _build(all_perms(n), n, lambda s: _best_pairs(s, n, objective)[0], direction)
    return DecisionTree(n, root, direction)


def worst_case_comparisons(n: int) -> int:
    return _worst_cost(all_perms(n), n)


# --------------------------------------------------------------------------
# baselines


def insertion_sort_trace(values: Sequence) -> tuple[int, int]:
    """Adjacent comparisons and adjacent swaps of textbook insertion sort."""
    a = list(values)
    comps = swaps = 0
    for i in range(1, len(a)):
        j = i
        while j > 0:
            comps += 1
            if a[j - 1] > a[j]:
                a[j - 1], a[j] = a[j], a[j - 1]
                swaps += 1
                j -= 1
            else:
                break
    return comps, swaps


def pivot_next_comparison(state: frozenset, n: int = 4, pivot: int = 0) -> tuple[int, int]:
    """Next comparison of the pivot sorter for an information state.

    Keeps the worst case optimal; among optimal comparisons it prefers ones
    against the pivot, then the lexicographically first.
    """
    pairs = _best_pairs(state, n, "worst_case")
    with_pivot = [p for p in pairs if pivot in p]
    return (with_pivot or pairs)[0]


def pivot_sort4(compare_fn: Callable[[int, int], bool], swap_fn: Callable[[int, int], None], direction: str = "asc") -> dict:
    """Sort four hidden items: A is the pivot, extra checks only where needed, then min_swap.

    ``compare_fn(i, j)`` returns whether the value at ``i`` is smaller than at
    ``j``; ``swap_fn(i, j)`` exchanges two positions.
    """
    state = all_perms(4)
    comparisons = []
    while len(state) > 1:
        i, j = pivot_next_comparison(state)
        less = bool(compare_fn(i, j))
        comparisons.append((i, j, less))
        state = _split(state, i, j)[0 if less else 1]
    (perm,) = state
    swaps = min_swap(perm, direction)
    for i, j in swaps:
        swap_fn(i, j)
    return {"comparisons": comparisons, "swaps": swaps, "perm": perm}


def pivot_sort4_tree(direction: str = "asc") -> DecisionTree:
    return DecisionTree(4, _build(all_perms(4), 4, pivot_next_comparison, direction), direction)


# --------------------------------------------------------------------------
# extraction and pruning


def _insert_path(tree_root, perm: Perm, comps, swaps):
    """Merge one root-to-leaf path into a tree, checking determinism."""
    if not comps:
        if tree_root is None:
            return Leaf(tuple(swaps), frozenset([perm]))
        if isinstance(tree_root, Leaf) and tree_root.swaps == tuple(swaps):
            tree_root.perms = tree_root.perms | {perm}
            return tree_root
        raise ExtractionError("policy is not a deterministic decision tree", perm)
    (i, j, less), rest = comps[0], comps[1:]
    if tree_root is None:
        tree_root = Node(i, j)
    if not isinstance(tree_root, Node) or (tree_root.i, tree_root.j) != (i, j):
        raise ExtractionError("policy is not a deterministic decision tree", perm)
    tree_root.perms = tree_root.perms | {perm}
    if less:
        tree_root.lt = _insert_path(tree_root.lt, perm, rest, swaps)
    else:
        tree_root.gt = _insert_path(tree_root.gt, perm, rest, swaps)
    return tree_root


def tree_from_traces(n: int, traces: dict[Perm, tuple[list, Sequence[Swap]]], direction: str = "asc") -> DecisionTree:
    root = None
    for perm, (comps, swaps) in sorted(traces.items()):
        root = _insert_path(root, perm, list(comps), swaps)
    return DecisionTree(n, root, direction)


def trace_rollout(ro, catalog, perm: Perm) -> tuple[list[tuple[int, int, bool]], list[Swap]]:
    """Comparisons (in original positions) and swaps performed in a sorting rollout."""
    cmp_env = catalog.env_id("compare")
    swp_env = catalog.env_id("swap")
    comps: list[tuple[int, int, bool]] = []
    swaps: list[Swap] = []
    first = None
    for rec in ro.records:
        a = catalog.actions[rec.action]
        if a.kind == "route":
            first = None
            continue
        if a.kind != "env":
            continue
        label = catalog.environments[a.env - 1].actions[a.local]
        pos = LABELS.index(label)
        if pos >= len(perm):
            raise ExtractionError(f"invalid label {label}", perm)
        if first is None:
            first = pos
            continue
        i, j, first = first, pos, None
        if i == j:
            raise ExtractionError("degenerate pair", perm)
        if a.env == cmp_env:
            if swaps:
                raise ExtractionError("comparison after swapping began", perm)
            comps.append((i, j, perm[i] < perm[j]))
        elif a.env == swp_env:
            if not swaps:
                known = ComparisonSet(len(perm))
                for ci, cj, less in comps:
                    known.add(ci, cj, less)
                if len(known.consistent_perms()) != 1:
                    raise ExtractionError("swap before the order was resolved", perm)
            swaps.append((min(i, j), max(i, j)))
    return comps, swaps


def extract_decision_tree(policy, n: int, catalog, *, direction: str = "asc", max_steps: int = 96) -> DecisionTree:
    """Run ``policy`` greedily on one representative of every relative-order class."""
    from .core import rollout
    from .tasks import sort_instance

    traces = {}
    for perm in itertools.permutations(range(n)):
        task = sort_instance([r + 1 for r in perm], direction)
        ro = rollout(policy, task, catalog, max_steps, np.random.default_rng(0), greedy=True)
        if ro.terminated_by != "answer_emitted":
            raise ExtractionError(f"policy did not finish ({ro.terminated_by})", perm)
        traces[perm] = trace_rollout(ro, catalog, perm)
    return tree_from_traces(n, traces, direction)


class TreePolicy:
    """Plays a decision tree through the compare and swap environments.

    Comparison outcomes are read back from the observation tokens, so the
    policy sees exactly what a learned policy would.
    """

    def __init__(self, tree: DecisionTree, catalog):
        self.tree = tree
        self.catalog = catalog

    def session(self):
        return _TreeSession(self)


class _TreeSession:
    def __init__(self, policy: TreePolicy):
        self.p = policy
        self.node = policy.tree.root
        self.queue: list[int] = []
        self.pending: Node | None = None

    def _plan(self) -> None:
        cat = self.p.catalog
        if isinstance(self.node, Node):
            self.pending = self.node
            self.queue = [cat.route("compare"), cat.env_action("compare", LABELS[self.node.i]),
                          cat.env_action("compare", LABELS[self.node.j])]
            return
        for i, j in self.node.swaps:
            self.queue += [cat.route("swap"), cat.env_action("swap", LABELS[i]), cat.env_action("swap", LABELS[j])]
        self.queue.append(cat.token("done"))
        self.node = None

    def distribution(self, state):
        from .core import available_actions

        if not self.queue:
            if self.pending is not None:
                rel = self.p.catalog.vocab[state.history[-2]]
                self.node = self.pending.lt if rel == "<" else self.pending.gt
                self.pending = None
            if self.node is None:
                raise ExtractionError("tree policy has nothing left to play", ())
            self._plan()
        support = available_actions(state, self.p.catalog)
        action = self.queue.pop(0)
        return support, (support == action).astype(float)


def _evaluate(node, perm: Perm):
    while isinstance(node, Node):
        node = node.lt if perm[node.i] < perm[node.j] else node.gt
    return None if node is None else node.swaps


def _relabel(node, perms: frozenset):
    """Copy of a subtree with permutation sets recomputed for ``perms``."""
    if node is None or not perms:
        return None
    if isinstance(node, Leaf):
        return Leaf(node.swaps, perms)
    lt, gt = _split(perms, node.i, node.j)
    return Node(node.i, node.j, _relabel(node.lt, lt), _relabel(node.gt, gt), perms)


def _prune(node, removed: list):
    if not isinstance(node, Node):
        return node
    node = Node(node.i, node.j, _prune(node.lt, removed), _prune(node.gt, removed), node.perms)
    wanted = {p: _evaluate(node, p) for p in node.perms}
    for child in (node.lt, node.gt):
        if child is not None and all(_evaluate(child, p) == a for p, a in wanted.items()):
            removed.append((node.i, node.j, node.perms))
            return _relabel(child, node.perms)
    return node


def prune_redundant(tree: DecisionTree, removed: list | None = None) -> DecisionTree:
    """Drop comparisons whose outcome never changes the leaf reached.

    ``removed`` (if given) collects ``(i, j, perms)`` of the dropped nodes.
    """
    removed = [] if removed is None else removed
    root = tree.root
    while True:
        before = len(removed)
        root = _prune(root, removed)
        if len(removed) == before:
            return DecisionTree(tree.n, root, tree.direction)


# --------------------------------------------------------------------------
# statistics and export


def tree_stats(tree: DecisionTree) -> dict:
    comps, swaps, worst, correct = [], [], 0, 0
    perms = list(itertools.permutations(range(tree.n)))
    for p in perms:
        c, s = tree.run(p)
        comps.append(len(c))
        swaps.append(len(s))
        worst = max(worst, len(c))
        values = [r + 1 for r in p]
        correct += is_sorted(apply_swaps(values, s), tree.direction)
    m = len(perms)
    return {
        "avg_comparisons": Fraction(sum(comps), m),
        "avg_swaps": Fraction(sum(swaps), m),
        "worst_comparisons": worst,
        "accuracy": Fraction(correct, m),
    }


def sort_stats(strategy: str, n: int, *, policy=None, catalog=None, samples: int = 10000, rng=None) -> dict:
    """Average comparisons/swaps of a strategy over all n! inputs (Monte Carlo for n > 6)."""
    if strategy == "optimal-tree":
        return tree_stats(optimal_comparison_tree(n, "average"))
    if strategy == "pivot_sort4":
        if n != 4:
            raise ValueError("pivot_sort4 sorts exactly four items")
        return tree_stats(pivot_sort4_tree())
    if strategy == "policy-greedy":
        if policy is None or catalog is None:
            raise ValueError("policy-greedy needs a policy and a catalog")
        return tree_stats(extract_decision_tree(policy, n, catalog))
    if strategy != "insertion":
        raise ValueError(f"unknown strategy {strategy!r}")

    if n <= 6:
        inputs = [[r + 1 for r in p] for p in itertools.permutations(range(n))]
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        inputs = [list(rng.permutation(n) + 1) for _ in range(samples)]
    traces = [insertion_sort_trace(v) for v in inputs]
    m = len(traces)
    return {
        "avg_comparisons": Fraction(sum(c for c, _ in traces), m),
        "avg_swaps": Fraction(sum(s for _, s in traces), m),
        "worst_comparisons": max(c for c, _ in traces),
        "accuracy": Fraction(1),
    }


STATS_COLUMNS = ("strategy", "n", "avg_comparisons", "avg_swaps", "worst_comparisons", "accuracy")


def stats_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=STATS_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (float(v) if isinstance(v, Fraction) else v) for k, v in row.items() if k in STATS_COLUMNS})
    return buf.getvalue()


def tree_to_dot(tree: DecisionTree, redundant: Iterable | None = None, name: str = "sort_tree") -> str:
    """DOT rendering; nodes listed in ``redundant`` (as ``(i, j, perms)``) are drawn red."""
    red = {(i, j, perms) for i, j, perms in (redundant or [])}
    lines = [f"digraph {name} {{", "  node [shape=box, fontname=Helvetica];"]
    counter = itertools.count()

    def visit(node) -> str:
        nid = f"n{next(counter)}"
        if isinstance(node, Leaf):
            text = " ".join(f"{LABELS[i]}{LABELS[j]}" for i, j in node.swaps) or "done"
            lines.append(f'  {nid} [label="swap {text}", shape=ellipse];' if node.swaps else f'  {nid} [label="done", shape=ellipse];')
            return nid
        attrs = f'label="{LABELS[node.i]}?{LABELS[node.j]}"'
        if (node.i, node.j, node.perms) in red:
            attrs += ", color=red, style=filled, fillcolor=mistyrose"
        lines.append(f"  {nid} [{attrs}];")
        for child, edge in ((node.lt, "<"), (node.gt, ">")):
            if child is not None:
                cid = visit(child)
                lines.append(f'  {nid} -> {cid} [label="{edge}"];')
        return nid

    visit(tree.root)
    lines.append("}")
    return "\n".join(lines) + "\n"
