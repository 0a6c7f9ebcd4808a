"""Expanded action spaces: a policy that writes tokens and acts in environments.

Modules:

* :mod:`expa.environments` - calculator and compare/swap over a hidden array
* :mod:`expa.core` - action catalog, global state and the rollout loop
* :mod:`expa.tasks` - generators, rewards and JSONL datasets
* :mod:`expa.policy` - numpy encoder, masked softmax head, pretraining
* :mod:`expa.optim` - clipped surrogate, counterfactual rollouts, CPO/GRPO, training
* :mod:`expa.sortlab` - swap/comparison oracles, decision trees and statistics
"""

__version__ = "0.1.0"
