"""Train a small policy to sort two and three hidden items with the counterfactual update.

The policy is first fit to text about sorting (so it already "speaks" the
compare/swap vocabulary), then trained with reinforcement learning until its
greedy decoding sorts every probe permutation. Takes a minute or so on one CPU.

Run: python demos/04_train_sort_curriculum.py [seed]
"""
import sys

from expa.optim import evaluate, sort_probe_set, train
from expa.policy import NeuralPolicy
from expa.sortlab import ExtractionError, extract_decision_tree, tree_stats

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
config = {
    "task": {"generator": "sort", "cfg": {"mix": {"2": 0.3, "3": 0.7}, "n_instances": 3000}},
    "catalog": {"kind": "sort", "n_labels": 3},
    "probe": {"sort_sizes": [2, 3]},
    "policy": {"d": 64, "heads": 4, "ff": 128, "max_len": 160},
    "update": {"m": 8, "learning_rate": 3e-4, "max_steps": 40, "beta": 0.01},
    "pretrain": {"epochs": 3, "lr": 3e-3, "corpus_size": 3000, "procedural_fraction": 0.8},
    "steps": 1000,
    "max_episodes": 20_000,
    "probe_every": 50,
    "early_stop": {"2": 1.0, "3": 0.95},
    "seed": seed,
}
res = train(config, log=print)
print(f"\nstopped after {res.steps} updates and {res.episodes} episodes; greedy probe {res.probe['groups']}")

report = evaluate(res.params, res.catalog, sort_probe_set([3]), max_steps=40)
print("three items by minimum swaps needed:", report["by_min_swaps"])

# read the learned behaviour back out as a comparison tree
try:
    tree = extract_decision_tree(NeuralPolicy(res.params, res.catalog), 3, res.catalog, max_steps=40)
    s = tree_stats(tree)
    print(f"learned tree: worst {s['worst_comparisons']} comparisons, average {s['avg_comparisons']}, "
          f"average swaps {s['avg_swaps']}, accuracy {s['accuracy']}")
except ExtractionError as exc:
    # sorting correctly does not require finishing all comparisons before the first swap,
    # but a comparison tree can only describe policies that do
    print("no comparison tree for this policy:", exc)
