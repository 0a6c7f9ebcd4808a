"""Clipped surrogate, counterfactual rollouts, CPO and GRPO updates, and the training loop."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from itertools import permutations
from typing import Sequence

import numpy as np

from .core import BOS, ActionCatalog, ConfigError, Rollout, rollout
from .policy import (
    Adam,
    NeuralPolicy,
    PolicyConfig,
    PolicyParams,
    backward,
    decision_batch,
    forward,
    init_expanded_actions,
    init_params,
    load_checkpoint,
    pad_batch,
    pretrain_language,
    save_checkpoint,
    support_mask,
    with_bos,
)
from .sortlab import min_swap, min_swap_count
from .tasks import (
    ANSWER,
    DONE,
    END,
    GENERATORS,
    RewardConfig,
    TaskInstance,
    arithmetic_corpus,
    read_jsonl,
    reward_em,
    sort_instance,
    sorting_corpus,
    task_catalog,
)

METRIC_COLUMNS = ("step", "mean_reward", "probe_accuracy", "tool_invocations_per_rollout", "branch_cf_fraction")


class TrainingAbort(RuntimeError):
    """Non-finite values appeared during training."""


@dataclass
class UpdateConfig:
    epsilon: float = 0.2
    beta: float = 0.01
    m: int = 8
    learning_rate: float = 3e-4
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    sigma_floor: float = 1e-6
    advantage_mode: str = "cpo"
    max_steps: int = 96
    prompts_per_step: int = 1

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.m < 2:
            raise ConfigError("group size m must be >= 2")
        if self.sigma_floor <= 0:
            raise ConfigError("sigma_floor must be > 0")
        if self.advantage_mode not in ("cpo", "grpo"):
            raise ConfigError(f"unknown advantage_mode {self.advantage_mode!r}")
        if self.learning_rate <= 0 or self.max_steps < 1 or self.prompts_per_step < 1:
            raise ConfigError("learning_rate, max_steps and prompts_per_step must be positive")

    def optimizer(self) -> Adam:
        return Adam(self.learning_rate, self.adam_b1, self.adam_b2, self.adam_eps)


@dataclass
class RolloutPair:
    factual: Rollout
    counterfactual: Rollout
    intervention_step: int
    forced_route: int


# --------------------------------------------------------------------------
# advantages


def standardized_advantages(rewards: Sequence[float], sigma_floor: float = 1e-6) -> np.ndarray:
    """``(r - mean) / max(std, floor)`` with the population standard deviation."""
    r = np.asarray(rewards, dtype=float)
    return (r - r.mean()) / max(float(r.std()), sigma_floor)


def counterfactual_branch(rewards: Sequence[float]) -> bool:
    """The exploration branch fires exactly when no factual rollout earned a positive reward."""
    return max(rewards) <= 0


def cpo_advantages(factual: Sequence[float], counterfactual: Sequence[float] | None, sigma_floor: float = 1e-6):
    """Returns ``(branch, advantages)`` where branch is ``"counterfactual"`` or ``"standardized"``."""
    if counterfactual_branch(factual):
        if counterfactual is None:
            raise ValueError("counterfactual rewards are required when every factual reward is <= 0")
        return "counterfactual", np.asarray(counterfactual, float) - np.asarray(factual, float)
    return "standardized", standardized_advantages(factual, sigma_floor)


# --------------------------------------------------------------------------
# clipped surrogate


def _masked_softmax(Z: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Log-probs and probs over ``mask``; both are 0 outside it."""
    Zm = np.where(mask, Z, -np.inf)
    Zm = Zm - Zm.max(axis=1, keepdims=True)
    E = np.where(mask, np.exp(Zm), 0.0)
    lse = np.log(E.sum(axis=1, keepdims=True))
    logp = np.where(mask, Zm - lse, 0.0)
    return logp, np.where(mask, np.exp(logp), 0.0)


def surrogate_objective(params: PolicyParams, rollouts: Sequence[Rollout], advantages: Sequence[float],
                        catalog: ActionCatalog, cfg: UpdateConfig, *, ref_params: PolicyParams | None = None,
                        old_logprobs: np.ndarray | None = None, weights: Sequence[float] | None = None,
                        need_grad: bool = True):
    """Weighted sum over rollouts of the clipped surrogate minus the KL penalty.

    ``old_logprobs`` holds log pi_old for every record in order; ``None`` means
    pi_old equals ``params`` (ratio exactly 1). Returns ``(value, grads)``.
    """
    weights = np.ones(len(rollouts)) if weights is None else np.asarray(weights, float)
    db = decision_batch(params, rollouts, catalog)
    head = params.head
    G = db.Gsel
    Z = G @ head.T
    logp, P = _masked_softmax(Z, support_mask(catalog, db.envs))
    R = len(db.actions)
    lp_a = logp[np.arange(R), db.actions]
    ratio = np.ones(R) if old_logprobs is None else np.exp(lp_a - np.asarray(old_logprobs, float))
    adv = np.asarray(advantages, float)[db.rows]
    w = weights[db.rows] * db.trainable
    plain = ratio * adv
    clipped = np.clip(ratio, 1 - cfg.epsilon, 1 + cfg.epsilon) * adv
    use_plain = plain <= clipped
    value = float(np.sum(w * np.minimum(plain, clipped)))

    dZ = -P * (w * np.where(use_plain, plain, 0.0))[:, None]
    dZ[np.arange(R), db.actions] += w * np.where(use_plain, plain, 0.0)

    if cfg.beta > 0 and ref_params is not None:
        kl_mask = support_mask(catalog, db.envs, vocab_only=True)
        Gr, _ = forward(ref_params, db.cache["tokens"])
        lq, _ = _masked_softmax(Gr[db.rows, db.cols] @ ref_params.head.T, kl_mask)
        lp, p = _masked_softmax(Z, kl_mask)
        diff = lp - lq
        kl = np.sum(p * diff, axis=1)
        value -= cfg.beta * float(np.sum(w * kl))
        dZ -= cfg.beta * w[:, None] * p * (diff - kl[:, None])

    if not need_grad:
        return value, None
    grads = {"head": dZ.T @ G}
    dG = np.zeros_like(db.G)
    np.add.at(dG, (db.rows, db.cols), dZ @ head)
    grads.update(backward(params, db.cache, dG))
    return value, grads


def record_logprobs(params: PolicyParams, rollouts: Sequence[Rollout], catalog: ActionCatalog) -> np.ndarray:
    """log pi(a_t | h_t, e_t) for every record of every rollout, in order."""
    db = decision_batch(params, rollouts, catalog)
    logp, _ = _masked_softmax(db.Gsel @ params.head.T, support_mask(catalog, db.envs))
    return logp[np.arange(len(db.actions)), db.actions]


def ppo_surrogate(params_new: PolicyParams, params_old: PolicyParams, ref_params: PolicyParams | None, rollout_: Rollout,
                  advantage: float, cfg: UpdateConfig, catalog: ActionCatalog, need_grad: bool = True):
    """Clipped surrogate of one rollout with a scalar advantage; returns ``(value, grads)``."""
    old = None if params_old is params_new else record_logprobs(params_old, [rollout_], catalog)
    return surrogate_objective(params_new, [rollout_], [advantage], catalog, cfg, ref_params=ref_params,
                               old_logprobs=old, need_grad=need_grad)


# --------------------------------------------------------------------------
# counterfactual rollouts


def intervention_weights(params: PolicyParams, factual: Rollout, route: int, catalog: ActionCatalog):
    """Language-env step indices of ``factual`` and their weights pi(desc(route) | h_t, e=0).

    Multi-token descriptions use the geometric mean of the token probabilities
    under teacher forcing.
    """
    steps = [t for t, r in enumerate(factual.records) if r.env == 0]
    if not steps:
        return np.array([], dtype=np.int64), np.array([])
    desc = list(catalog.desc_ids[route])
    bos = catalog.token(BOS)
    hist = factual.final_state.history
    lang = catalog.available_index[0]
    head = params.head[lang]
    pos_of = {int(a): k for k, a in enumerate(lang)}
    pre = [factual.records[t].pre_len for t in steps]
    if len(desc) == 1:
        G, _ = forward(params, with_bos(hist[: max(pre)], bos)[None, :])
        Gs = G[0, pre]
        logp = _log_softmax_rows(Gs @ head.T)[:, pos_of[desc[0]]]
    else:
        seqs = [with_bos(list(hist[:p]) + desc[:-1], bos) for p in pre]
        G, _ = forward(params, pad_batch(seqs, bos))
        logp = np.zeros(len(steps))
        for k, tok in enumerate(desc):
            rows = _log_softmax_rows(G[np.arange(len(steps)), np.array(pre) + k] @ head.T)
            logp += rows[:, pos_of[tok]]
        logp /= len(desc)
    return np.asarray(steps, dtype=np.int64), np.exp(logp)


def _log_softmax_rows(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def sample_intervention(steps: np.ndarray, weights: np.ndarray, rng: np.random.Generator) -> int:
    """Draw t' proportionally to ``weights``; uniform over ``steps`` if every weight is zero."""
    if len(steps) == 0:
        raise ValueError("rollout has no language-environment step to intervene on")
    total = float(np.sum(weights))
    if not math.isfinite(total):
        raise FloatingPointError("non-finite intervention weights")
    p = np.full(len(steps), 1.0 / len(steps)) if total <= 0 else np.asarray(weights) / total
    return int(steps[rng.choice(len(steps), p=p)])


def counterfactual_rollout(params: PolicyParams, factual: Rollout, route_env: int, task: TaskInstance,
                           catalog: ActionCatalog, rng: np.random.Generator, *, max_steps: int = 96,
                           policy: NeuralPolicy | None = None) -> RolloutPair:
    """Replay ``factual`` up to a sampled step t', force the route to ``route_env`` there, then resample."""
    route = catalog.route(route_env)
    steps, w = intervention_weights(params, factual, route, catalog)
    t = sample_intervention(steps, w, rng)
    policy = policy or NeuralPolicy(params, catalog)
    cf = rollout(policy, task, catalog, max_steps, rng, prefix=factual.records[:t], forced=route)
    return RolloutPair(factual, cf, t, route_env)


# --------------------------------------------------------------------------
# batch updates


@dataclass
class GroupResult:
    rollouts: list[Rollout]
    advantages: np.ndarray
    branch: str
    factual_rewards: np.ndarray
    factual_routes: float
    episodes: int
    pairs: list[RolloutPair] = field(default_factory=list)


def collect_group(params: PolicyParams, task: TaskInstance, catalog: ActionCatalog, cfg: UpdateConfig,
                  rng: np.random.Generator, route_env: int = 1, mode: str | None = None) -> GroupResult:
    """Sample m factual rollouts (plus counterfactuals in CPO's exploration branch) and their advantages."""
    mode = mode or cfg.advantage_mode
    try:
        return _collect_group(params, task, catalog, cfg, rng, route_env, mode)
    except FloatingPointError as exc:
        raise TrainingAbort(f"{exc} at update {params.version}") from exc


def _collect_group(params, task, catalog, cfg, rng, route_env, mode) -> GroupResult:
    policy = NeuralPolicy(params, catalog)
    factual = [rollout(policy, task, catalog, cfg.max_steps, rng) for _ in range(cfg.m)]
    r = np.array([ro.cumulative_reward for ro in factual])
    routes = float(np.mean([ro.count_routes(catalog) for ro in factual]))
    if mode == "cpo" and counterfactual_branch(r):
        pairs = [counterfactual_rollout(params, ro, route_env, task, catalog, rng, max_steps=cfg.max_steps, policy=policy)
                 for ro in factual]
        rc = np.array([p.counterfactual.cumulative_reward for p in pairs])
        _, adv = cpo_advantages(r, rc, cfg.sigma_floor)
        return GroupResult([p.counterfactual for p in pairs], adv, "counterfactual", r, routes, 2 * cfg.m, pairs)
    return GroupResult(factual, standardized_advantages(r, cfg.sigma_floor), "standardized", r, routes, cfg.m)


def apply_update(params: PolicyParams, ref_params: PolicyParams | None, groups: Sequence[GroupResult],
                 catalog: ActionCatalog, cfg: UpdateConfig, opt: Adam) -> float:
    """One ascent step on the mean of the groups' objectives (each rollout weighted 1/m)."""
    rollouts = [ro for g in groups for ro in g.rollouts]
    adv = np.concatenate([g.advantages for g in groups])
    if not np.any(adv) and (cfg.beta == 0 or ref_params is None):
        return 0.0
    weights = np.full(len(rollouts), 1.0 / (cfg.m * len(groups)))
    value, grads = surrogate_objective(params, rollouts, adv, catalog, cfg, ref_params=ref_params, weights=weights)
    bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
    if bad or not math.isfinite(value):
        raise TrainingAbort(f"non-finite gradient in {bad or ['objective']} at update {params.version}")
    opt.step(params, grads, maximize=True)
    if not params.is_finite():
        raise TrainingAbort(f"non-finite parameters after update {params.version}")
    return value


def _batch_update(mode, params, ref_params, s0, cfg, rng, catalog, opt, route_env):
    params = params.copy()
    opt = opt or cfg.optimizer()
    group = collect_group(params, s0, catalog, cfg, rng, route_env, mode)
    apply_update(params, ref_params, [group], catalog, cfg, opt)
    metrics = {
        "branch": group.branch,
        "mean_reward": float(group.factual_rewards.mean()),
        "advantages": group.advantages.tolist(),
        "tool_invocations_per_rollout": group.factual_routes,
        "episodes": group.episodes,
    }
    return params, metrics


def cpo_batch_update(params: PolicyParams, ref_params: PolicyParams | None, s0: TaskInstance, cfg: UpdateConfig,
                     rng: np.random.Generator, *, catalog: ActionCatalog, opt: Adam | None = None, route_env: int = 1):
    """One CPO step from initial state ``s0``; returns ``(new_params, metrics)``."""
    return _batch_update("cpo", params, ref_params, s0, cfg, rng, catalog, opt, route_env)


def grpo_batch_update(params: PolicyParams, ref_params: PolicyParams | None, s0: TaskInstance, cfg: UpdateConfig,
                      rng: np.random.Generator, *, catalog: ActionCatalog, opt: Adam | None = None, route_env: int = 1):
    """Group-relative baseline: standardized factual advantages, no counterfactuals."""
    return _batch_update("grpo", params, ref_params, s0, cfg, rng, catalog, opt, route_env)


# --------------------------------------------------------------------------
# evaluation


def task_success(ro: Rollout, task: TaskInstance, catalog: ActionCatalog) -> bool:
    if task.kind == "sort":
        return ro.terminated_by == "answer_emitted" and ro.final_state.latent.is_sorted()
    return reward_em(ro, task, catalog) == 1.0


def _group_key(task: TaskInstance) -> str:
    return str(task.hidden.n) if task.kind == "sort" else task.kind


def evaluate(params: PolicyParams | None, catalog: ActionCatalog, tasks: Sequence[TaskInstance], *, greedy: bool = True,
             seed: int = 0, max_steps: int = 96, policy_for=None) -> dict:
    """Success rate overall, per group (sort size or task kind) and, for sorting, per minimal-swap count.

    ``policy_for(task)`` overrides the policy per task (used for oracle checks).
    Sampled decoding gives each task position its own stream, so one task's
    outcome never depends on how many draws earlier tasks consumed.
    """
    shared = NeuralPolicy(params, catalog) if params is not None else None
    streams = np.random.SeedSequence(seed).spawn(len(tasks))
    hits: dict[str, list[bool]] = {}
    by_swaps: dict[str, dict[int, list[bool]]] = {}
    rewards, routes = [], []
    for task, ss in zip(tasks, streams):
        policy = policy_for(task) if policy_for is not None else shared
        ro = rollout(policy, task, catalog, max_steps, np.random.default_rng(ss), greedy=greedy)
        ok = task_success(ro, task, catalog)
        key = _group_key(task)
        hits.setdefault(key, []).append(ok)
        rewards.append(ro.cumulative_reward)
        routes.append(ro.count_routes(catalog))
        if task.kind == "sort":
            s = min_swap_count(task.hidden.ranks(), task.hidden.direction)
            by_swaps.setdefault(key, {}).setdefault(s, []).append(ok)
    total = [x for v in hits.values() for x in v]
    report = {
        "n": len(total),
        "accuracy": float(np.mean(total)) if total else 0.0,
        "groups": {k: float(np.mean(v)) for k, v in sorted(hits.items())},
        "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
        "tool_invocations_per_rollout": float(np.mean(routes)) if routes else 0.0,
        "decoding": "greedy" if greedy else "sampled",
    }
    if by_swaps:
        report["by_min_swaps"] = {
            k: {str(s): {"n": len(v), "accuracy": float(np.mean(v))} for s, v in sorted(d.items())}
            for k, d in sorted(by_swaps.items())
        }
    return report


def oracle_actions(task: TaskInstance, catalog: ActionCatalog) -> list[int]:
    """A correct action script built from the task's hidden answer."""
    if task.kind == "sort":
        z = task.hidden
        script = []
        for i, j in min_swap(z.ranks(), z.direction):
            script += [catalog.route("swap"), catalog.env_action("swap", z.labels[i]), catalog.env_action("swap", z.labels[j])]
        return script + [catalog.token(DONE)]
    answer = list(task.metadata["expression"]) if task.kind == "countdown" else list(task.target)
    return catalog.encode([ANSWER, *answer, END])


def sort_probe_set(sizes: Sequence[int], directions: Sequence[str] = ("asc", "desc")) -> list[TaskInstance]:
    """Every permutation of each size in each direction."""
    out = []
    for n in sizes:
        for perm in permutations(range(1, n + 1)):
            for d in directions:
                out.append(sort_instance([10 * v for v in perm], d))
    return out


# --------------------------------------------------------------------------
# training driver


@dataclass
class TrainConfig:
    """Everything a training run depends on. Unknown keys are rejected by :meth:`from_dict`."""

    task: dict = field(default_factory=lambda: {"generator": "sort", "cfg": {"mix": {"2": 0.5, "3": 0.5}, "n_instances": 2000}})
    catalog: dict = field(default_factory=lambda: {"kind": "sort", "n_labels": 3})
    probe: dict | None = field(default_factory=lambda: {"sort_sizes": [2, 3]})
    reward: dict = field(default_factory=dict)
    policy: dict = field(default_factory=dict)
    update: dict = field(default_factory=dict)
    pretrain: dict | None = None
    steps: int = 100
    max_episodes: int | None = None
    seed: int = 0
    probe_every: int = 10
    checkpoint_every: int = 0
    early_stop: dict | None = None
    out: str | None = None
    resume: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.update_config()
        try:
            PolicyConfig(**self.policy)
            RewardConfig(**self.reward)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        if self.steps < 0 or self.probe_every < 1:
            raise ConfigError("steps must be >= 0 and probe_every >= 1")
        if self.pretrain is not None:
            extra = set(self.pretrain) - {"epochs", "lr", "batch_size", "corpus_size", "tool_fraction", "max_ops", "procedural_fraction"}
            if extra:
                raise ConfigError(f"unknown pretrain keys: {sorted(extra)}")
        if "generator" in self.task and self.task["generator"] not in GENERATORS:
            raise ConfigError(f"unknown generator {self.task['generator']!r}")

    def update_config(self) -> UpdateConfig:
        try:
            return UpdateConfig(**self.update)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


def load_tasks(source: dict, rng: np.random.Generator, reward_cfg: RewardConfig | None = None) -> list[TaskInstance]:
    """Materialise a task source: ``{"dataset": path}``, ``{"generator": name, "cfg": {...}}`` or ``{"sort_sizes": [...]}``."""
    if "dataset" in source:
        tasks = read_jsonl(source["dataset"])
    elif "sort_sizes" in source:
        tasks = sort_probe_set(source["sort_sizes"], source.get("directions", ("asc", "desc")))
    elif "generator" in source:
        cfg = dict(source.get("cfg", {}))
        if "mix" in cfg:
            cfg["mix"] = {int(k): v for k, v in cfg["mix"].items()}
        try:
            tasks = GENERATORS[source["generator"]](cfg, rng)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        raise ConfigError(f"task source needs 'dataset', 'generator' or 'sort_sizes': {source}")
    if reward_cfg is not None:
        for t in tasks:
            t.reward_cfg = reward_cfg
    return tasks


def language_corpus(tasks: Sequence[TaskInstance], rng: np.random.Generator, pretrain: dict) -> list[list[str]]:
    if tasks and tasks[0].kind == "sort":
        return sorting_corpus(tasks, rng, pretrain.get("max_ops", 6), pretrain.get("procedural_fraction", 0.0))
    return arithmetic_corpus(tasks, rng, pretrain.get("tool_fraction", 0.05))


@dataclass
class TrainResult:
    params: PolicyParams
    ref_params: PolicyParams
    catalog: ActionCatalog
    metrics: list[dict]
    episodes: int
    probe: dict | None
    steps: int


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def _rng_state(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def _restore_rng(state: str) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(state)
    return rng


def _early_stop(probe: dict | None, targets: dict | None) -> bool:
    if not probe or not targets:
        return False
    return all(probe["groups"].get(str(k), 0.0) >= v for k, v in targets.items())


def save_training_state(path, params, ref_params, opt: Adam, rng, step, episodes, metrics, probe,
                        catalog_cfg: dict | None = None) -> None:
    arrays = {f"ref/{k}": v for k, v in ref_params.tensors.items()}
    arrays.update({f"m/{k}": v for k, v in opt.m.items()})
    arrays.update({f"v/{k}": v for k, v in opt.v.items()})
    extra = {"catalog": catalog_cfg, "step": step, "episodes": episodes, "rng": _rng_state(rng), "metrics": metrics, "probe": probe,
             "adam": {k: getattr(opt, k) for k in ("lr", "b1", "b2", "eps", "t")}}
    save_checkpoint(path, params, extra, arrays)


def train(config: TrainConfig | dict, log=None) -> TrainResult:
    """Run CPO or GRPO training as configured; writes metrics and checkpoints when ``config.out`` is set."""
    cfg = config if isinstance(config, TrainConfig) else TrainConfig.from_dict(config)
    ucfg = cfg.update_config()
    reward_cfg = RewardConfig(**cfg.reward)
    catalog = task_catalog(**cfg.catalog)
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    data_rng, init_rng, probe_rng = (np.random.default_rng(s) for s in seeds[:3])
    tasks = load_tasks(cfg.task, data_rng, reward_cfg)
    probe_tasks = load_tasks(cfg.probe, probe_rng, reward_cfg) if cfg.probe else []

    if cfg.resume:
        params, extra, arrays = load_checkpoint(cfg.resume, catalog)
        ref_params = params.copy()
        ref_params.tensors = {k[4:]: v for k, v in arrays.items() if k.startswith("ref/")}
        opt = Adam()
        opt.load_state_dict({**extra["adam"],
                             "m": {k[2:]: v for k, v in arrays.items() if k.startswith("m/")},
                             "v": {k[2:]: v for k, v in arrays.items() if k.startswith("v/")}})
        rng = _restore_rng(extra["rng"])
        start, episodes, metrics, probe = extra["step"], extra["episodes"], extra["metrics"], extra["probe"]
    else:
        params = init_params(catalog, PolicyConfig(**cfg.policy), init_rng)
        if cfg.pretrain:
            pt = cfg.pretrain
            corpus_tasks = tasks[: pt.get("corpus_size", len(tasks))]
            corpus = language_corpus(corpus_tasks, init_rng, pt)
            params, losses = pretrain_language(params, corpus, catalog, pt.get("epochs", 3), pt.get("lr", 1e-3),
                                               pt.get("batch_size", 32), init_rng)
            if log:
                log(f"pretrain losses {[round(x, 4) for x in losses]}")
        params = init_expanded_actions(params, catalog)
        ref_params = params.copy()
        opt = ucfg.optimizer()
        rng = np.random.default_rng(seeds[3])
        start, episodes, metrics, probe = 0, 0, [], None
        if probe_tasks:
            probe = evaluate(params, catalog, probe_tasks, max_steps=ucfg.max_steps)

    out = cfg.out
    if out:
        os.makedirs(out, exist_ok=True)
    last_acc = probe["accuracy"] if probe else float("nan")
    step = start
    while step < cfg.steps and not _early_stop(probe, cfg.early_stop):
        if cfg.max_episodes is not None and episodes >= cfg.max_episodes:
            break
        route_env = step % catalog.K + 1
        groups = []
        for _ in range(ucfg.prompts_per_step):
            task = tasks[int(rng.integers(len(tasks)))]
            groups.append(collect_group(params, task, catalog, ucfg, rng, route_env))
        apply_update(params, ref_params, groups, catalog, ucfg, opt)
        episodes += sum(g.episodes for g in groups)
        step += 1
        if probe_tasks and (step % cfg.probe_every == 0 or step == cfg.steps):
            probe = evaluate(params, catalog, probe_tasks, max_steps=ucfg.max_steps)
            last_acc = probe["accuracy"]
        row = {
            "step": step,
            "mean_reward": float(np.mean([g.factual_rewards.mean() for g in groups])),
            "probe_accuracy": last_acc,
            "tool_invocations_per_rollout": float(np.mean([g.factual_routes for g in groups])),
            "branch_cf_fraction": float(np.mean([g.branch == "counterfactual" for g in groups])),
            "episodes": episodes,
        }
        metrics.append(row)
        if log and (step % cfg.probe_every == 0):
            log(f"step {step} episodes {episodes} reward {row['mean_reward']:.3f} probe {last_acc:.3f}")
        if out and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_training_state(os.path.join(out, f"checkpoint_{step:06d}.npz"), params, ref_params, opt, rng, step,
                                episodes, metrics, probe, cfg.catalog)

    if out:
        save_training_state(os.path.join(out, "checkpoint_final.npz"), params, ref_params, opt, rng, step, episodes,
                            metrics, probe, cfg.catalog)
        with open(os.path.join(out, "metrics.csv"), "w") as fh:
            fh.write(metrics_csv(metrics))
        if probe:
            with open(os.path.join(out, "probe.json"), "w") as fh:
                json.dump(probe, fh, indent=2, sort_keys=True)
    return TrainResult(params, ref_params, catalog, metrics, episodes, probe, step)
