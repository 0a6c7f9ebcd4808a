"""Expanded action space and the rollout loop.

Global action indices are laid out as::

    [0, |V|)                 vocabulary tokens
    [|V|, |V| + K)           routing actions g_1..g_K
    [|V| + K, N)             environment actions, contiguous per environment

Environment ids run from 1 to K; 0 is the language environment.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from .environments import Environment

BOS = "<bos>"

AGENT, ROUTE_DESC, OBSERVATION = 0, 1, 2
TAG_NAMES = ("agent", "route_desc", "observation")


class InvalidStateError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ActionId:
    kind: str  # "vocab", "route" or "env"
    index: int
    env: int = 0
    local: int = -1


class ActionCatalog:
    """Vocabulary plus the external environments that extend it."""

    def __init__(self, vocab: Sequence[str], environments: Sequence[Environment]):
        vocab = list(vocab)
        if BOS not in vocab:
            vocab.insert(0, BOS)
        if len(set(vocab)) != len(vocab):
            raise ConfigError("duplicate vocabulary tokens")
        self.vocab = vocab
        self.environments = list(environments)
        self.token_index = {tok: i for i, tok in enumerate(vocab)}
        self.n_vocab = len(vocab)
        self.K = len(self.environments)

        actions = [ActionId("vocab", i) for i in range(self.n_vocab)]
        actions += [ActionId("route", self.n_vocab + k, env=k + 1) for k in range(self.K)]
        self.env_slices: dict[int, slice] = {}
        for k, env in enumerate(self.environments, start=1):
            start = len(actions)
            actions += [ActionId("env", start + j, env=k, local=j) for j in range(len(env.actions))]
            self.env_slices[k] = slice(start, len(actions))
        self.actions = actions
        self.N = len(actions)

        self.available_index = {0: np.arange(self.n_vocab + self.K)}
        for k, sl in self.env_slices.items():
            self.available_index[k] = np.arange(sl.start, sl.stop)

        # description token ids for every expanded action; vocab tokens describe themselves
        self.desc_ids: list[tuple[int, ...]] = []
        for a in actions:
            if a.kind == "vocab":
                self.desc_ids.append((a.index,))
                continue
            env = self.environments[a.env - 1]
            toks = env.route_desc if a.kind == "route" else env.action_desc(a.local)
            missing = [t for t in toks if t not in self.token_index]
            if missing or not toks:
                raise ConfigError(f"description {toks!r} of {env.name} uses tokens outside the vocabulary: {missing}")
            self.desc_ids.append(tuple(self.token_index[t] for t in toks))

    # lookups -----------------------------------------------------------
    def env_id(self, name: str) -> int:
        for k, env in enumerate(self.environments, start=1):
            if env.name == name:
                return k
        raise KeyError(name)

    def route(self, env: int | str) -> int:
        if isinstance(env, str):
            env = self.env_id(env)
        return self.n_vocab + env - 1

    def env_action(self, env: int | str, label: str) -> int:
        if isinstance(env, str):
            env = self.env_id(env)
        local = self.environments[env - 1].actions.index(label)
        return self.env_slices[env].start + local

    def token(self, tok: str) -> int:
        return self.token_index[tok]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        try:
            return [self.token_index[t] for t in tokens]
        except KeyError as exc:
            raise ConfigError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.vocab[i] for i in ids]

    def label(self, index: int) -> str:
        a = self.actions[index]
        if a.kind == "vocab":
            return self.vocab[index]
        env = self.environments[a.env - 1]
        if a.kind == "route":
            return f"route:{env.name}"
        return f"{env.name}:{env.actions[a.local]}"

    def hash(self) -> str:
        blob = json.dumps(
            {
                "vocab": self.vocab,
                "envs": [[e.name, list(e.route_desc), list(e.actions)] for e in self.environments],
            },
            ensure_ascii=False,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class GlobalState:
    """Mutable episode state: token history with provenance, active env, latent state."""

    history: list[int] = field(default_factory=list)
    tags: list[int] = field(default_factory=list)
    active_env: int = 0
    micro: Any = None
    latent: Any = None
    step_count: int = 0
    exits: dict[int, int] = field(default_factory=dict)

    def append(self, ids: Sequence[int], tag: int) -> None:
        self.history.extend(ids)
        self.tags.extend([tag] * len(ids))


def available_actions(state: GlobalState, catalog: ActionCatalog) -> np.ndarray:
    """Global indices the policy may choose from in the active environment."""
    try:
        return catalog.available_index[state.active_env]
    except KeyError:
        raise InvalidStateError(f"unknown environment id {state.active_env}") from None


def apply_action(state: GlobalState, action: int, catalog: ActionCatalog, task: Any = None):
    """Execute one action in place. Returns ``(state, reward, observation_positions)``."""
    a = catalog.actions[action]
    assert action in available_actions(state, catalog), f"{catalog.label(action)} not available"
    obs_positions: list[int] = []
    if a.kind == "vocab":
        state.append([action], AGENT)
    elif a.kind == "route":
        state.append(catalog.desc_ids[action], ROUTE_DESC)
        state.active_env = a.env
        state.micro = catalog.environments[a.env - 1].reset()
    else:
        env = catalog.environments[a.env - 1]
        obs, state.micro, state.latent, exit_ = env.step(state.micro, state.latent, a.local)
        start = len(state.history)
        state.append(catalog.encode(obs), OBSERVATION)
        obs_positions = list(range(start, len(state.history)))
        if exit_:
            state.exits[a.env] = state.exits.get(a.env, 0) + 1
            state.active_env = 0
            state.micro = None
    state.step_count += 1
    reward = task.step_reward(state, action) if task is not None and hasattr(task, "step_reward") else 0.0
    return state, reward, obs_positions


@dataclass
class StepRecord:
    pre_len: int
    env: int
    action: int
    reward: float = 0.0
    trainable: bool = True
    logprob: float = 0.0


@dataclass
class Rollout:
    records: list[StepRecord]
    final_state: GlobalState
    terminated_by: str
    prompt_len: int
    cumulative_reward: float = 0.0

    def __len__(self) -> int:
        return len(self.records)

    def count_routes(self, catalog: ActionCatalog, env: int | None = None) -> int:
        routes = (catalog.actions[r.action] for r in self.records)
        return sum(1 for a in routes if a.kind == "route" and (env is None or a.env == env))


class Session(Protocol):
    def distribution(self, state: GlobalState) -> tuple[np.ndarray, np.ndarray]: ...


class Policy(Protocol):
    def session(self) -> Session: ...


def new_state(task: Any, catalog: ActionCatalog) -> GlobalState:
    state = GlobalState(latent=task.initial_latent())
    state.append(catalog.encode(task.prompt), OBSERVATION)
    return state


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u * probs.sum(), side="right"))
    return min(idx, len(probs) - 1)


def rollout(
    policy: Policy,
    task: Any,
    catalog: ActionCatalog,
    max_steps: int = 96,
    rng: np.random.Generator | None = None,
    *,
    greedy: bool = False,
    prefix: Sequence[StepRecord] = (),
    forced: int | None = None,
    max_history: int | None = None,
) -> Rollout:
    """Run one episode from the task prompt.

    ``prefix`` records are replayed verbatim (their stored log-probs are kept),
    then ``forced`` (if given) is taken as the next action regardless of the
    policy, and sampling continues until the task's stop token, ``max_steps``
    or ``max_history``.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    state = new_state(task, catalog)
    prompt_len = len(state.history)
    session = policy.session()
    stop = catalog.token(task.stop_token)
    records: list[StepRecord] = []
    terminated_by = "step_limit"

    for t in range(max_steps):
        if t < len(prefix):
            rec = prefix[t]
            action = rec.action
            logprob = rec.logprob
        else:
            support, probs = session.distribution(state)
            if t == len(prefix) and forced is not None:
                pos = int(np.flatnonzero(support == forced)[0])
            elif greedy:
                pos = int(np.argmax(probs))
            else:
                pos = _sample(probs, rng)
            action = int(support[pos])
            logprob = float(np.log(probs[pos]))
        rec = StepRecord(len(state.history), state.active_env, action, 0.0, True, logprob)
        _, reward, _ = apply_action(state, action, catalog, task)
        rec.reward = reward
        records.append(rec)
        if action == stop and rec.env == 0:
            terminated_by = "answer_emitted"
            break
        if max_history is not None and len(state.history) >= max_history:
            terminated_by = "env_error"
            break

    out = Rollout(records, state, terminated_by, prompt_len)
    if records:
        records[-1].reward += float(task.terminal_reward(out, catalog))
    out.cumulative_reward = float(sum(r.reward for r in records))
    return out


def rollout_to_jsonl(ro: Rollout, catalog: ActionCatalog) -> str:
    """One header line (prompt, final history) followed by one line per record."""
    hist = ro.final_state.history
    lines = [
        {
            "type": "rollout",
            "prompt": catalog.decode(hist[: ro.prompt_len]),
            "history": catalog.decode(hist),
            "tags": [TAG_NAMES[t] for t in ro.final_state.tags],
            "cumulative_reward": ro.cumulative_reward,
            "terminated_by": ro.terminated_by,
        }
    ]
    for t, rec in enumerate(ro.records):
        lines.append(
            {
                "type": "step",
                "t": t,
                "env": rec.env,
                "action_kind": catalog.actions[rec.action].kind,
                "action_label": catalog.label(rec.action),
                "reward": rec.reward,
                "trainable": rec.trainable,
            }
        )
    return "\n".join(json.dumps(x, ensure_ascii=False) for x in lines) + "\n"


class FixedPolicy:
    """Plays a scripted action list, then uniform-random over the available set.

    Handy for tests and for driving environments by hand.
    """

    def __init__(self, catalog: ActionCatalog, actions: Sequence[int] = ()):
        self.catalog = catalog
        self.actions = list(actions)

    def session(self):
        return _FixedSession(self)


class _FixedSession:
    def __init__(self, policy: FixedPolicy):
        self.policy = policy
        self.t = 0

    def distribution(self, state):
        support = available_actions(state, self.policy.catalog)
        if self.t < len(self.policy.actions):
            probs = (support == self.policy.actions[self.t]).astype(float)
            if probs.sum() == 0:
                raise InvalidStateError(f"scripted action {self.policy.actions[self.t]} unavailable")
        else:
            probs = np.full(len(support), 1.0 / len(support))
        self.t += 1
        return support, probs


class UniformPolicy:
    def __init__(self, catalog: ActionCatalog):
        self.catalog = catalog

    def session(self):
        return self

    def distribution(self, state):
        support = available_actions(state, self.catalog)
        return support, np.full(len(support), 1.0 / len(support))
