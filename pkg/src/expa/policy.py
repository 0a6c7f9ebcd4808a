"""Small differentiable policy over the expanded action space.

Encoder (all float64, gradients written by hand)::

    x_i = E[tok_i] + P[i]
    u_i = tanh(sum_j x_{i-j} C_j + c)          causal conv, window ``conv``
    y_i = u_i + Wo * MHA(u)_i                  causal multi-head attention
    g_i = y_i + tanh(y_i W1 + b1) W2

The policy is ``softmax`` of ``W g(h_t)`` restricted to the actions available
in the active environment. A begin token is always prepended, so position
``k`` of the encoder output summarises ``history[:k]``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import BOS, ActionCatalog, available_actions

TENSORS = ("embed", "pos", "conv", "conv_b", "wq", "wk", "wv", "wo", "w1", "b1", "w2", "head")


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    d: int = 64
    heads: int = 4
    ff: int = 128
    conv: int = 3
    max_len: int = 512


@dataclass
class PolicyParams:
    tensors: dict[str, np.ndarray]
    config: PolicyConfig
    n_vocab: int
    catalog_hash: str = ""
    version: int = 0

    @property
    def embeddings(self) -> np.ndarray:
        return self.tensors["embed"]

    @property
    def head(self) -> np.ndarray:
        return self.tensors["head"]

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.tensors.items()}, self.config, self.n_vocab, self.catalog_hash, self.version)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in TENSORS])

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


def init_params(catalog: ActionCatalog, config: PolicyConfig = PolicyConfig(), rng: np.random.Generator | None = None,
                expanded: str = "zero") -> PolicyParams:
    """Random parameters. Expanded head rows start at zero (or small noise with ``expanded="random"``)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    d, f, k = config.d, config.ff, config.conv
    n = rng.standard_normal
    t = {
        "embed": 0.5 * n((catalog.n_vocab, d)),
        "pos": 0.1 * n((config.max_len, d)),
        "conv": n((k, d, d)) / np.sqrt(k * d),
        "conv_b": np.zeros(d),
        "wq": n((d, d)) / np.sqrt(d),
        "wk": n((d, d)) / np.sqrt(d),
        "wv": n((d, d)) / np.sqrt(d),
        "wo": n((d, d)) / np.sqrt(d),
        "w1": n((d, f)) / np.sqrt(d),
        "b1": np.zeros(f),
        "w2": 0.5 * n((f, d)) / np.sqrt(f),
        "head": np.zeros((catalog.N, d)),
    }
    t["head"][: catalog.n_vocab] = n((catalog.n_vocab, d)) / np.sqrt(d)
    if expanded == "random":
        t["head"][catalog.n_vocab :] = n((catalog.N - catalog.n_vocab, d)) / np.sqrt(d)
    return PolicyParams(t, config, catalog.n_vocab, catalog.hash())


def init_expanded_actions(params: PolicyParams, catalog: ActionCatalog) -> PolicyParams:
    """Copy each expanded action's head row from its description token(s).

    Single-token descriptions get an exact copy, so the action and its
    description share a logit for every history; longer descriptions get the
    mean of their rows.
    """
    out = params.copy()
    head = out.tensors["head"]
    for a in catalog.actions[catalog.n_vocab :]:
        head[a.index] = head[list(catalog.desc_ids[a.index])].mean(axis=0)
    return out


# --------------------------------------------------------------------------
# batched forward / backward


def _shift(x: np.ndarray, j: int) -> np.ndarray:
    if j == 0:
        return x
    out = np.zeros_like(x)
    out[:, j:] = x[:, :-j]
    return out


def _unshift(x: np.ndarray, j: int) -> np.ndarray:
    if j == 0:
        return x
    out = np.zeros_like(x)
    out[:, :-j] = x[:, j:]
    return out


def forward(params: PolicyParams, tokens: np.ndarray) -> tuple[np.ndarray, dict]:
    """Encode a right-padded batch of token ids (begin token included). Returns ``(G, cache)``."""
    T, cfg = params.tensors, params.config
    tokens = np.asarray(tokens)
    B, L = tokens.shape
    if L > cfg.max_len:
        raise ValueError(f"sequence of length {L} exceeds max_len={cfg.max_len}")
    H, dh = cfg.heads, cfg.d // cfg.heads

    X = T["embed"][tokens] + T["pos"][:L]
    pre = T["conv_b"] + sum(_shift(X, j) @ T["conv"][j] for j in range(cfg.conv))
    U = np.tanh(pre)
    split = lambda M: M.reshape(B, L, H, dh).transpose(0, 2, 1, 3)
    Q, K, V = split(U @ T["wq"]), split(U @ T["wk"]), split(U @ T["wv"])
    S = Q @ K.transpose(0, 1, 3, 2) / np.sqrt(dh)
    S = S + np.triu(np.full((L, L), -np.inf), 1)
    S = S - S.max(axis=-1, keepdims=True)
    A = np.exp(S)
    A /= A.sum(axis=-1, keepdims=True)
    O = (A @ V).transpose(0, 2, 1, 3).reshape(B, L, cfg.d)
    Y = U + O @ T["wo"]
    M = np.tanh(Y @ T["w1"] + T["b1"])
    G = Y + M @ T["w2"]
    cache = dict(tokens=tokens, X=X, U=U, Q=Q, K=K, V=V, A=A, O=O, Y=Y, M=M)
    return G, cache


def backward(params: PolicyParams, cache: dict, dG: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dG * G)`` w.r.t. every encoder tensor (head excluded)."""
    T, cfg = params.tensors, params.config
    X, U, Q, K, V, A, O, Y, M = (cache[k] for k in ("X", "U", "Q", "K", "V", "A", "O", "Y", "M"))
    B, L, d = X.shape
    H, dh = cfg.heads, d // cfg.heads
    flat = lambda Z: Z.reshape(-1, Z.shape[-1])
    g: dict[str, np.ndarray] = {}

    dMpre = (dG @ T["w2"].T) * (1.0 - M**2)
    g["w2"] = flat(M).T @ flat(dG)
    g["w1"] = flat(Y).T @ flat(dMpre)
    g["b1"] = dMpre.sum(axis=(0, 1))
    dY = dG + dMpre @ T["w1"].T

    g["wo"] = flat(O).T @ flat(dY)
    dO = (dY @ T["wo"].T).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
    dA = dO @ V.transpose(0, 1, 3, 2)
    dV = A.transpose(0, 1, 3, 2) @ dO
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
    dQ = dS @ K
    dK = dS.transpose(0, 1, 3, 2) @ Q
    merge = lambda Z: Z.transpose(0, 2, 1, 3).reshape(B, L, d)
    dQ, dK, dV = merge(dQ), merge(dK), merge(dV)
    g["wq"] = flat(U).T @ flat(dQ)
    g["wk"] = flat(U).T @ flat(dK)
    g["wv"] = flat(U).T @ flat(dV)
    dU = dY + dQ @ T["wq"].T + dK @ T["wk"].T + dV @ T["wv"].T

    dPre = dU * (1.0 - U**2)
    g["conv_b"] = dPre.sum(axis=(0, 1))
    g["conv"] = np.stack([flat(_shift(X, j)).T @ flat(dPre) for j in range(cfg.conv)])
    dX = sum(_unshift(dPre @ T["conv"][j].T, j) for j in range(cfg.conv))
    g["embed"] = np.zeros_like(T["embed"])
    np.add.at(g["embed"], cache["tokens"].ravel(), flat(dX))
    g["pos"] = np.zeros_like(T["pos"])
    g["pos"][:L] = dX.sum(axis=0)
    return g


def with_bos(history, bos: int = 0) -> np.ndarray:
    return np.concatenate([[bos], np.asarray(history, dtype=np.int64)]).astype(np.int64)


def encode(params: PolicyParams, history, bos: int = 0) -> np.ndarray:
    """Encoding ``g(h)`` of a token-id history (the begin token is prepended here)."""
    G, _ = forward(params, with_bos(history, bos)[None, :])
    return G[0, -1]


def pad_batch(seqs: list[np.ndarray], pad: int = 0) -> np.ndarray:
    L = max(len(s) for s in seqs)
    out = np.full((len(seqs), L), pad, dtype=np.int64)
    for b, s in enumerate(seqs):
        out[b, : len(s)] = s
    return out


# --------------------------------------------------------------------------
# distributions


@dataclass
class ActionDistribution:
    support: np.ndarray
    probs: np.ndarray

    def prob(self, action: int) -> float:
        hit = np.flatnonzero(self.support == action)
        return float(self.probs[hit[0]]) if len(hit) else 0.0

    def dense(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.support] = self.probs
        return out


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def action_distribution(params: PolicyParams, history, active_env: int, catalog: ActionCatalog) -> ActionDistribution:
    g = encode(params, history, catalog.token(BOS))
    support = catalog.available_index[active_env]
    return ActionDistribution(support, _softmax(params.head[support] @ g))


def vocab_distribution(params: PolicyParams, history, catalog: ActionCatalog) -> np.ndarray:
    """Next-token distribution renormalised over the vocabulary only."""
    g = encode(params, history, catalog.token(BOS))
    return _softmax(params.head[: catalog.n_vocab] @ g)


class IncrementalEncoder:
    """Causal encoder with cached keys/values, for token-by-token rollouts."""

    def __init__(self, params: PolicyParams, bos: int = 0):
        self.p = params
        cfg = params.config
        self.H, self.dh = cfg.heads, cfg.d // cfg.heads
        self.X = np.zeros((cfg.max_len, cfg.d))
        self.K = np.zeros((self.H, cfg.max_len, self.dh))
        self.V = np.zeros((self.H, cfg.max_len, self.dh))
        self.n = 0
        self.g = None
        self.push([bos])

    def push(self, ids) -> np.ndarray:
        T, cfg = self.p.tensors, self.p.config
        ids = np.asarray(ids, dtype=np.int64)
        s, e = self.n, self.n + len(ids)
        if e > cfg.max_len:
            raise ValueError(f"history exceeds max_len={cfg.max_len}")
        self.X[s:e] = T["embed"][ids] + T["pos"][s:e]
        pre = np.broadcast_to(T["conv_b"], (e - s, cfg.d)).copy()
        for j in range(cfg.conv):
            lo = max(s - j, 0)
            if e - j > lo:
                pre[lo + j - s :] += self.X[lo : e - j] @ T["conv"][j]
        U = np.tanh(pre)
        self.K[:, s:e] = (U @ T["wk"]).reshape(e - s, self.H, self.dh).transpose(1, 0, 2)
        self.V[:, s:e] = (U @ T["wv"]).reshape(e - s, self.H, self.dh).transpose(1, 0, 2)
        self.n = e
        u = U[-1]
        q = (u @ T["wq"]).reshape(self.H, self.dh)
        sc = np.einsum("hld,hd->hl", self.K[:, :e], q) / np.sqrt(self.dh)
        sc -= sc.max(axis=1, keepdims=True)
        a = np.exp(sc)
        a /= a.sum(axis=1, keepdims=True)
        o = np.einsum("hl,hld->hd", a, self.V[:, :e]).reshape(cfg.d)
        y = u + o @ T["wo"]
        self.g = y + np.tanh(y @ T["w1"] + T["b1"]) @ T["w2"]
        return self.g


class NeuralPolicy:
    """Adapter that lets :func:`expa.core.rollout` sample from ``PolicyParams``."""

    def __init__(self, params: PolicyParams, catalog: ActionCatalog):
        self.params = params
        self.catalog = catalog
        self.bos = catalog.token(BOS)
        self._heads = {e: params.head[idx] for e, idx in catalog.available_index.items()}

    def session(self) -> "_NeuralSession":
        return _NeuralSession(self)


class _NeuralSession:
    def __init__(self, policy: NeuralPolicy):
        self.policy = policy
        self.enc = IncrementalEncoder(policy.params, policy.bos)
        self.seen = 0

    def distribution(self, state):
        if len(state.history) > self.seen:
            self.enc.push(state.history[self.seen :])
            self.seen = len(state.history)
        support = available_actions(state, self.policy.catalog)
        probs = _softmax(self.policy._heads[state.active_env] @ self.enc.g)
        if not np.isfinite(probs).all():
            raise FloatingPointError("policy produced non-finite action probabilities")
        return support, probs


# --------------------------------------------------------------------------
# replaying rollouts


@dataclass
class DecisionBatch:
    """Encoder outputs at every decision point of a list of rollouts."""

    G: np.ndarray  # (B, L, d)
    cache: dict
    rows: np.ndarray  # rollout index per record
    cols: np.ndarray  # encoder position per record
    actions: np.ndarray
    envs: np.ndarray
    trainable: np.ndarray
    owner: list[tuple[int, int]] = field(default_factory=list)  # record span per rollout

    @property
    def Gsel(self) -> np.ndarray:
        return self.G[self.rows, self.cols]


def decision_batch(params: PolicyParams, rollouts, catalog: ActionCatalog) -> DecisionBatch:
    bos = catalog.token(BOS)
    seqs, rows, cols, acts, envs, train, owner = [], [], [], [], [], [], []
    for b, ro in enumerate(rollouts):
        last = max((r.pre_len for r in ro.records), default=0)
        seqs.append(with_bos(ro.final_state.history[:last], bos))
        start = len(rows)
        for r in ro.records:
            rows.append(b)
            cols.append(r.pre_len)
            acts.append(r.action)
            envs.append(r.env)
            train.append(r.trainable)
        owner.append((start, len(rows)))
    G, cache = forward(params, pad_batch(seqs, bos))
    return DecisionBatch(G, cache, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
                         np.array(acts, dtype=np.int64), np.array(envs, dtype=np.int64), np.array(train, dtype=bool), owner)


def support_mask(catalog: ActionCatalog, envs: np.ndarray, vocab_only: bool = False) -> np.ndarray:
    """Boolean (R, N) mask of each record's support; ``vocab_only`` restricts language steps to V."""
    mask = np.zeros((len(envs), catalog.N), dtype=bool)
    for e, idx in catalog.available_index.items():
        sel = envs == e
        if e == 0 and vocab_only:
            mask[np.ix_(sel, np.arange(catalog.n_vocab))] = True
        else:
            mask[np.ix_(sel, idx)] = True
    return mask


def masked_log_softmax(Z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    Zm = np.where(mask, Z, -np.inf)
    Zm = Zm - Zm.max(axis=1, keepdims=True)
    lse = np.log(np.exp(Zm).sum(axis=1, keepdims=True))
    return np.where(mask, Zm - lse, -np.inf)


def sequence_logprob(params: PolicyParams, rollout, catalog: ActionCatalog) -> np.ndarray:
    """log pi(a_t | h_t, e_t) recomputed from the stored history, trainable steps only."""
    db = decision_batch(params, [rollout], catalog)
    logp = masked_log_softmax(db.Gsel @ params.head.T, support_mask(catalog, db.envs))
    out = logp[np.arange(len(db.actions)), db.actions]
    return out[db.trainable]


# --------------------------------------------------------------------------
# KL over the vocabulary


def kl_vocab(params: PolicyParams, ref_params: PolicyParams, history, catalog: ActionCatalog) -> float:
    """Exact KL(pi || pi_ref) with both next-token distributions restricted to V."""
    p = vocab_distribution(params, history, catalog)
    q = vocab_distribution(ref_params, history, catalog)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def kl_vocab_and_grad(params: PolicyParams, ref_params: PolicyParams, history, catalog: ActionCatalog):
    bos = catalog.token(BOS)
    toks = with_bos(history, bos)[None, :]
    G, cache = forward(params, toks)
    Gr, _ = forward(ref_params, toks)
    V = catalog.n_vocab
    g, gr = G[0, -1], Gr[0, -1]
    p = _softmax(params.head[:V] @ g)
    lq = np.log(_softmax(ref_params.head[:V] @ gr))
    lp = np.log(p)
    kl = float(np.sum(p * (lp - lq)))
    dz = p * (lp - lq - kl)
    grads = {"head": np.zeros_like(params.head)}
    grads["head"][:V] = np.outer(dz, g)
    dG = np.zeros_like(G)
    dG[0, -1] = dz @ params.head[:V]
    grads.update(backward(params, cache, dG))
    return kl, grads


# --------------------------------------------------------------------------
# language pretraining


class Adam:
    """Per-tensor Adam; ``step`` ascends when ``maximize`` is set."""

    def __init__(self, lr: float = 3e-4, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: PolicyParams, grads: dict[str, np.ndarray], maximize: bool = False) -> None:
        self.t += 1
        sign = 1.0 if maximize else -1.0
        for k, gk in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(gk)
                self.v[k] = np.zeros_like(gk)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * gk
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * gk**2
            mhat = self.m[k] / (1 - self.b1**self.t)
            vhat = self.v[k] / (1 - self.b2**self.t)
            params.tensors[k] += sign * self.lr * mhat / (np.sqrt(vhat) + self.eps)
        params.version += 1

    def state_dict(self) -> dict:
        return {"lr": self.lr, "b1": self.b1, "b2": self.b2, "eps": self.eps, "t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.lr, self.b1, self.b2, self.eps, self.t = (state[k] for k in ("lr", "b1", "b2", "eps", "t"))
        self.m = {k: v.copy() for k, v in state["m"].items()}
        self.v = {k: v.copy() for k, v in state["v"].items()}


def lm_loss_and_grad(params: PolicyParams, batch: list[list[int]], bos: int, need_grad: bool = True):
    """Mean next-token cross-entropy over V for a batch of token-id sequences."""
    V = params.n_vocab
    seqs = [with_bos(s, bos) for s in batch]
    toks = pad_batch(seqs, bos)
    G, cache = forward(params, toks[:, :-1])
    valid = np.zeros(toks[:, 1:].shape, dtype=bool)
    for b, s in enumerate(seqs):
        valid[b, : len(s) - 1] = True
    Z = G @ params.head[:V].T
    Z = Z - Z.max(axis=-1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=-1, keepdims=True)
    tgt = toks[:, 1:]
    n = valid.sum()
    bi, li = np.nonzero(valid)
    loss = float(-np.log(P[bi, li, tgt[bi, li]]).sum() / n)
    if not need_grad:
        return loss, None
    dZ = P * valid[..., None]
    dZ[bi, li, tgt[bi, li]] -= 1.0
    dZ /= n
    grads = {"head": np.zeros_like(params.head)}
    grads["head"][:V] = dZ.reshape(-1, V).T @ G.reshape(-1, G.shape[-1])
    grads.update(backward(params, cache, dZ @ params.head[:V]))
    return loss, grads


def pretrain_language(params: PolicyParams, corpus, catalog: ActionCatalog, epochs: int = 10, lr: float = 1e-3,
                      batch_size: int = 32, rng: np.random.Generator | None = None):
    """Next-token training on V only; returns ``(params, per-epoch mean losses)``.

    Expanded head rows are never touched.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params = params.copy()
    bos = catalog.token(BOS)
    data = [catalog.encode(s) if s and isinstance(s[0], str) else list(s) for s in corpus]
    opt = Adam(lr)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for k in range(0, len(data), batch_size):
            batch = [data[i] for i in order[k : k + batch_size]]
            loss, grads = lm_loss_and_grad(params, batch, bos)
            opt.step(params, grads)
            total += loss * len(batch)
            count += len(batch)
        losses.append(total / count)
    return params, losses


def perplexity(params: PolicyParams, corpus, catalog: ActionCatalog) -> float:
    bos = catalog.token(BOS)
    data = [catalog.encode(s) if s and isinstance(s[0], str) else list(s) for s in corpus]
    nll, n = 0.0, 0
    for k in range(0, len(data), 64):
        batch = data[k : k + 64]
        loss, _ = lm_loss_and_grad(params, batch, bos, need_grad=False)
        m = sum(len(s) for s in batch)
        nll += loss * m
        n += m
    return float(np.exp(nll / n))


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: PolicyParams, extra: dict | None = None, arrays: dict[str, np.ndarray] | None = None) -> None:
    meta = {"config": asdict(params.config), "catalog_hash": params.catalog_hash, "version": params.version,
            "n_vocab": params.n_vocab, "extra": extra or {}}
    payload = {f"t/{k}": v for k, v in params.tensors.items()}
    payload.update({f"x/{k}": v for k, v in (arrays or {}).items()})
    payload["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path, catalog: ActionCatalog | None = None):
    """Returns ``(params, extra, arrays)``; a catalog hash mismatch raises :class:`CheckpointError`."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        tensors = {k[2:]: z[k].copy() for k in z.files if k.startswith("t/")}
        arrays = {k[2:]: z[k].copy() for k in z.files if k.startswith("x/")}
    if catalog is not None and meta["catalog_hash"] != catalog.hash():
        raise CheckpointError(f"checkpoint catalog {meta['catalog_hash']} does not match {catalog.hash()}")
    params = PolicyParams(tensors, PolicyConfig(**meta["config"]), meta["n_vocab"], meta["catalog_hash"], meta["version"])
    return params, meta["extra"], arrays
