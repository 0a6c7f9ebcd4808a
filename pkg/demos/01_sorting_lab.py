"""Sorting with a compare tool and a swap tool: what is optimal, and how close a simple rule gets.

Run: python demos/01_sorting_lab.py
"""
from expa.sortlab import (
    min_swap,
    min_swap_count,
    optimal_comparison_tree,
    optimal_swap_stats,
    pivot_sort4_tree,
    prune_redundant,
    sort_stats,
    tree_stats,
    tree_to_dot,
    worst_case_comparisons,
)

# Swaps first. Any permutation splits into cycles, and each cycle of length k
# needs exactly k - 1 swaps, so the minimum is n minus the number of cycles.
perm = (2, 0, 3, 1)
print("permutation", perm, "needs", min_swap_count(perm), "swaps:", min_swap(perm))
for n in range(2, 7):
    print(f"  n={n}: average minimum swaps over all inputs = {optimal_swap_stats(n)}")

# Comparisons next. Identifying one of n! orders needs at least log2(n!) yes/no
# answers; exhaustive search over decision trees shows the bound is met up to 5.
print("\nworst-case comparisons, exhaustive search:")
for n in range(2, 6):
    print(f"  n={n}: {worst_case_comparisons(n)}")

# A pivot-first rule that only asks what it still needs to know, then swaps
# along cycles. On four items it beats insertion sort on comparisons and never
# swaps more than necessary.
print("\nfour items, averaged over all 24 inputs:")
for name in ("insertion", "pivot_sort4", "optimal-tree"):
    s = sort_stats(name, 4)
    print(f"  {name:12s} comparisons {float(s['avg_comparisons']):.3f}  swaps {float(s['avg_swaps']):.3f}  "
          f"accuracy {s['accuracy']}")

tree = pivot_sort4_tree()
stats = tree_stats(tree)
print("\npivot tree: worst", stats["worst_comparisons"], "comparisons, average", stats["avg_comparisons"])

# Pruning drops comparisons whose answer never changes which leaf we reach.
removed = []
pruned = prune_redundant(tree, removed)
print("redundant comparisons removed:", len(removed))
print("\nDOT for the optimal three-item tree:\n")
print(tree_to_dot(optimal_comparison_tree(3)))

assert tree_stats(pruned)["accuracy"] == 1
