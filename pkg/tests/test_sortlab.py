import csv
import io
import itertools
from fractions import Fraction

import numpy as np
import pydot
import pytest
from hypothesis import given
from hypothesis import strategies as st

from expa.core import FixedPolicy, UniformPolicy, rollout
from expa.sortlab import (
    STATS_COLUMNS,
    ComparisonSet,
    DecisionTree,
    ExtractionError,
    IndeterminateOrder,
    Leaf,
    Node,
    TreePolicy,
    apply_swaps,
    extract_decision_tree,
    insertion_sort_trace,
    is_sorted,
    min_swap,
    min_swap_count,
    optimal_comparison_tree,
    optimal_swap_stats,
    pivot_sort4,
    pivot_sort4_tree,
    prune_redundant,
    sort_stats,
    stats_csv,
    trace_rollout,
    tree_from_traces,
    tree_stats,
    tree_to_dot,
    worst_case_comparisons,
)
from expa.tasks import sort_instance
from oracles import bfs_min_swaps, info_lower_bound, minimax_comparisons


class TestMinSwap:
    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
    def test_matches_bfs(self, n):
        for perm in itertools.permutations(range(n)):
            for direction in ("asc", "desc"):
                swaps = min_swap(perm, direction)
                assert len(swaps) == bfs_min_swaps(perm, direction == "desc") == min_swap_count(perm, direction)
                assert is_sorted(apply_swaps(perm, swaps), direction)

    @given(st.permutations(range(7)), st.sampled_from(["asc", "desc"]))
    def test_sorts_any_permutation(self, perm, direction):
        assert is_sorted(apply_swaps(perm, min_swap(tuple(perm), direction)), direction)

    def test_from_comparison_set(self):
        cs = ComparisonSet(3)
        cs.add(0, 1, False)
        cs.add(1, 2, False)
        assert cs.ranks() == (2, 1, 0)
        assert min_swap(cs) == [(0, 2)]

    def test_indeterminate(self):
        cs = ComparisonSet(3)
        cs.add(0, 1, True)
        with pytest.raises(IndeterminateOrder):
            min_swap(cs)

    def test_contradiction(self):
        cs = ComparisonSet(3)
        cs.add(0, 1, True)
        cs.add(1, 2, True)
        with pytest.raises(ValueError):
            cs.add(0, 2, False)

    def test_expected_swaps(self):
        # mean of n - cycles over S_n is n - H_n
        for n in range(1, 7):
            harmonic = sum(Fraction(1, k) for k in range(1, n + 1))
            assert optimal_swap_stats(n) == n - harmonic
        assert optimal_swap_stats(4) == Fraction(46, 24)


class TestComparisonTrees:
    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_worst_case_matches_minimax(self, n):
        perms = frozenset(itertools.permutations(range(n)))
        assert worst_case_comparisons(n) == minimax_comparisons(perms)
        assert optimal_comparison_tree(n).root is not None
        assert tree_stats(optimal_comparison_tree(n))["worst_comparisons"] == minimax_comparisons(perms)

    @pytest.mark.parametrize("n", [2, 3, 4, 5])
    def test_information_bound(self, n):
        assert worst_case_comparisons(n) >= info_lower_bound(n)
        assert worst_case_comparisons(n) == [1, 3, 5, 7][n - 2]

    def test_optimal_tree_sorts(self):
        for direction in ("asc", "desc"):
            stats = tree_stats(optimal_comparison_tree(4, "average", direction))
            assert stats["accuracy"] == 1 and stats["avg_swaps"] == Fraction(23, 12)

    def test_average_objective_is_no_worse(self):
        a = tree_stats(optimal_comparison_tree(4, "average"))["avg_comparisons"]
        w = tree_stats(optimal_comparison_tree(4, "worst_case"))["avg_comparisons"]
        assert a <= w

    def test_unknown_objective(self):
        with pytest.raises(ValueError):
            optimal_comparison_tree(3, "median")


class TestPivotSorter:
    @pytest.mark.parametrize("direction", ["asc", "desc"])
    def test_sorts_every_input(self, direction):
        for perm in itertools.permutations(range(4)):
            arr = [10 * r for r in perm]

            def cmp(i, j):
                return arr[i] < arr[j]

            def swp(i, j):
                arr[i], arr[j] = arr[j], arr[i]

            out = pivot_sort4(cmp, swp, direction)
            assert is_sorted(arr, direction)
            assert len(out["comparisons"]) <= 5
            assert len(out["swaps"]) == min_swap_count(perm, direction)

    def test_stats(self):
        stats = tree_stats(pivot_sort4_tree())
        assert stats["worst_comparisons"] == 5 and stats["accuracy"] == 1
        assert stats["avg_comparisons"] == Fraction(14, 3)
        assert stats["avg_swaps"] == Fraction(23, 12)

    def test_first_comparison_uses_pivot(self):
        root = pivot_sort4_tree().root
        assert 0 in (root.i, root.j)


class TestInsertionBaseline:
    def test_counts(self):
        assert insertion_sort_trace([1, 2, 3]) == (2, 0)
        assert insertion_sort_trace([3, 2, 1]) == (3, 3)

    def test_average_swaps_is_inversions(self):
        stats = sort_stats("insertion", 4)
        assert stats["avg_swaps"] == Fraction(4 * 3, 4)  # n(n-1)/4 inversions on average
        assert stats["accuracy"] == 1

    def test_sampled_for_large_n(self):
        stats = sort_stats("insertion", 8, samples=200, rng=np.random.default_rng(0))
        assert stats["worst_comparisons"] <= 28

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            sort_stats("bogo", 3)


def redundant_tree():
    """n=2 tree that asks A?B twice on the < branch."""
    traces = {(0, 1): ([(0, 1, True), (0, 1, True)], []), (1, 0): ([(0, 1, False)], [(0, 1)])}
    return tree_from_traces(2, traces)


class TestPruning:
    def test_removes_repeated_question(self):
        removed = []
        tree = prune_redundant(redundant_tree(), removed)
        assert len(removed) == 1
        assert len(tree.internal()) == 1
        assert tree_stats(tree)["avg_comparisons"] == 1

    def test_idempotent(self):
        once = prune_redundant(redundant_tree())
        twice = prune_redundant(once)
        assert tree_to_dot(once) == tree_to_dot(twice)

    def test_preserves_outcomes(self):
        before = pivot_sort4_tree()
        after = prune_redundant(before)
        for p in itertools.permutations(range(4)):
            assert before.run(p)[1] == after.run(p)[1]
        assert len(after.nodes()) <= len(before.nodes())

    def test_optimal_tree_has_nothing_to_prune(self):
        removed = []
        prune_redundant(optimal_comparison_tree(4), removed)
        assert removed == []


class TestExtraction:
    @pytest.mark.parametrize("direction", ["asc", "desc"])
    def test_tree_policy_round_trip(self, sort4_catalog, direction):
        tree = pivot_sort4_tree(direction)
        back = extract_decision_tree(TreePolicy(tree, sort4_catalog), 4, sort4_catalog, direction=direction)
        assert back.schedule() == tree.schedule()
        assert tree_stats(back) == tree_stats(tree)

    def test_nondeterministic_policy_rejected(self, sort_catalog):
        with pytest.raises(ExtractionError) as info:
            extract_decision_tree(UniformPolicy(sort_catalog), 3, sort_catalog, max_steps=8)
        assert info.value.perm is not None

    def test_trace_rollout(self, sort_catalog):
        cat = sort_catalog
        acts = [cat.route("compare"), cat.env_action("compare", "B"), cat.env_action("compare", "A"),
                cat.route("swap"), cat.env_action("swap", "A"), cat.env_action("swap", "B"), cat.token("done")]
        ro = rollout(FixedPolicy(cat, acts), sort_instance([2, 1]), cat, 20)
        assert trace_rollout(ro, cat, (1, 0)) == ([(1, 0, True)], [(0, 1)])

    def test_swap_before_resolved(self, sort_catalog):
        cat = sort_catalog
        acts = [cat.route("swap"), cat.env_action("swap", "A"), cat.env_action("swap", "B"), cat.token("done")]
        ro = rollout(FixedPolicy(cat, acts), sort_instance([2, 1]), cat, 20)
        with pytest.raises(ExtractionError):
            trace_rollout(ro, cat, (1, 0))

    def test_missing_branch(self):
        tree = DecisionTree(2, Node(0, 1, Leaf(()), None))
        with pytest.raises(ExtractionError):
            tree.run((1, 0))


class TestExport:
    def test_dot_parses(self):
        removed = []
        tree = redundant_tree()
        prune_redundant(tree, removed)
        text = tree_to_dot(tree, removed)
        (graph,) = pydot.graph_from_dot_data(text)
        assert len(graph.get_nodes()) - 1 == len(tree.nodes())  # pydot also lists the node default
        red = [n for n in graph.get_nodes() if n.get("color") == "red"]
        assert len(red) == 1
        assert {e.get("label").strip('"') for e in graph.get_edges()} == {"<", ">"}

    def test_stats_csv(self):
        rows = [{"strategy": "optimal-tree", "n": 4, **sort_stats("optimal-tree", 4)}]
        parsed = list(csv.DictReader(io.StringIO(stats_csv(rows))))
        assert tuple(parsed[0]) == STATS_COLUMNS
        assert float(parsed[0]["avg_swaps"]) == pytest.approx(46 / 24)
