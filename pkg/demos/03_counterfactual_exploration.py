"""Why counterfactual rollouts help when every sample fails.

With group-relative advantages a group of all-zero rewards carries no signal.
The counterfactual update instead replays each failed episode up to a language
step, forces a tool call there, lets the policy continue, and credits the
difference in reward to that forced call.

Run: python demos/03_counterfactual_exploration.py
"""
import numpy as np

from expa.core import rollout
from expa.optim import counterfactual_rollout, cpo_advantages, intervention_weights, standardized_advantages
from expa.policy import NeuralPolicy, PolicyConfig, init_expanded_actions, init_params
from expa.tasks import sort_instance, task_catalog

print("group-relative advantages for rewards [1, 0, 0, 1]:", standardized_advantages([1, 0, 0, 1]))
print("... and for [0, 0, 0, 0]:", standardized_advantages([0, 0, 0, 0]), "(nothing to learn from)")
branch, adv = cpo_advantages([0, 0, 0, 0], [1, 0, 1, 0])
print(f"counterfactual branch: {branch}, advantages {adv}")

# an untrained policy rarely sorts anything, which is exactly the failing regime
rng = np.random.default_rng(0)
cat = task_catalog("sort", 3)
params = init_expanded_actions(init_params(cat, PolicyConfig(d=32, heads=2, ff=48, max_len=128), rng), cat)
policy = NeuralPolicy(params, cat)
task = sort_instance([20, 30, 10], "asc")
fact = rollout(policy, task, cat, 30, rng)
print("\nfactual episode:", [cat.label(r.action) for r in fact.records], "reward", fact.cumulative_reward)

# where to intervene: steps weighted by how likely the policy was to write the
# tool's description word there anyway
route = cat.route("swap")
steps, w = intervention_weights(params, fact, route, cat)
print("language steps", steps.tolist())
print("intervention weights", np.round(w / w.sum(), 3).tolist())

pair = counterfactual_rollout(params, fact, cat.env_id("swap"), task, cat, rng, max_steps=30, policy=policy)
t = pair.intervention_step
cf = pair.counterfactual
print(f"\nintervened at step {t}; the first {t} actions are copied, then the route is forced:")
print("  ", [cat.label(r.action) for r in cf.records[: t + 3]], "...")
print("counterfactual reward", cf.cumulative_reward, "advantage", cf.cumulative_reward - fact.cumulative_reward)
