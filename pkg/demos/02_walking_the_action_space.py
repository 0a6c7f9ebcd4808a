"""One history, several environments: driving the expanded action space by hand.

The agent writes tokens in the language environment. A route action writes its
short description into the history and hands control to a tool; the tool's
observations land in the same history until it exits.

Run: python demos/02_walking_the_action_space.py
"""
import numpy as np

from expa.core import TAG_NAMES, FixedPolicy, GlobalState, available_actions, rollout, rollout_to_jsonl
from expa.tasks import ANSWER, END, gen_arithmetic, sort_instance, task_catalog

# --- calculator -------------------------------------------------------------
cat = task_catalog("arithmetic")
print("global action layout:", cat.n_vocab, "vocabulary tokens, then",
      [cat.label(a.index) for a in cat.actions[cat.n_vocab:cat.n_vocab + cat.K]], "then tool buttons")

task = gen_arithmetic({"n_instances": 1, "min_ops": 2, "max_ops": 2, "paraphrase_fraction": 0.0},
                      np.random.default_rng(7))[0]
expr = list(task.metadata["expression"])
print("prompt:", " ".join(task.prompt))

# route to the calculator, press every button of the expression, then "="
script = [cat.route("calculator")] + [cat.env_action("calculator", b) for b in expr + ["="]]
# read the result off the history and answer with it
script += cat.encode([ANSWER, *task.target, END])
ro = rollout(FixedPolicy(cat, script), task, cat, len(script))

hist, tags = ro.final_state.history, ro.final_state.tags
print("\nhistory with provenance:")
print("  " + " ".join(f"{cat.label(t)}/{TAG_NAMES[g][0]}" for t, g in zip(hist, tags)))
print("reward", ro.cumulative_reward, "ended by", ro.terminated_by)
assert cat.decode(hist[-len(task.target) - 1:-1]) == list(task.target)

# --- compare and swap -------------------------------------------------------
cat = task_catalog("sort", 3)
task = sort_instance([30, 10, 20], "asc")
inside = [cat.label(a) for a in available_actions(GlobalState(active_env=cat.env_id("compare")), cat)]
print("\ninside the compare tool the agent may only pick labels:", inside)

# two picks per call: the first echoes, the second reports the relation and exits
A, B, C = (cat.env_action("compare", x) for x in "ABC")
script = [cat.route("compare"), A, B, cat.route("compare"), B, C,
          cat.route("swap"), cat.env_action("swap", "A"), cat.env_action("swap", "B"),
          cat.route("swap"), cat.env_action("swap", "B"), cat.env_action("swap", "C"),
          cat.token("done")]
ro = rollout(FixedPolicy(cat, script), task, cat, len(script))
print("final hidden array:", ro.final_state.latent.values, "reward", ro.cumulative_reward)

# every episode serialises to JSON lines: one header, then one line per step
print("\n" + rollout_to_jsonl(ro, cat).splitlines()[1])
