"""Task generators, terminal rewards and the dataset JSONL format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Sequence

import numpy as np

from .core import ActionCatalog
from .environments import (
    CALC_BUTTONS,
    DIGITS,
    DIVIDE,
    ERR,
    LABELS,
    MINUS,
    OPERATORS,
    PLUS,
    TIMES,
    Calculator,
    Compare,
    ExpressionError,
    HiddenArray,
    Swap,
    evaluate_expression,
    literals,
    render_number,
)
from .sortlab import OPTIMAL_WORST_COMPARISONS, min_swap_count

ANSWER, END, DONE = "answer", "end", "done"
COMMA = ","
COUNT_SYMBOLS = ("w", "x", "y", "z")
SORT_MIX = {2: 0.1, 3: 0.2, 4: 0.3, 5: 0.4}
ORDER_SIZE_MIX = {2: 0.3, 3: 0.3, 4: 0.2, 5: 0.2}

_ONES = "zero one two three four five six seven eight nine".split()
_TEENS = "ten eleven twelve thirteen fourteen fifteen sixteen seventeen eighteen nineteen".split()
_TENS = "_ _ twenty thirty forty fifty sixty seventy eighty ninety".split()
OP_WORDS = {PLUS: ("plus",), MINUS: ("minus",), TIMES: ("times",), DIVIDE: ("divided", "by")}

#: (prefix, suffix) word templates wrapped around a spelled-out expression
TEMPLATES = (
    (("what", "is"), ()),
    (("compute",), ()),
    (("evaluate",), ()),
    (("find",), ()),
    (("work", "out"), ()),
    (("tell", "me"), ()),
    (("please", "evaluate"), ()),
    (("what", "do", "you", "get", "from"), ()),
    (("the", "value", "of"), ("is", "what")),
    ((), ("equals", "what")),
)


def number_words(n: int) -> list[str]:
    """Spell a non-negative integer below one million."""
    if n < 0 or n >= 1_000_000:
        raise ValueError(n)
    if n < 10:
        return [_ONES[n]]
    if n < 20:
        return [_TEENS[n - 10]]
    if n < 100:
        return [_TENS[n // 10]] + ([_ONES[n % 10]] if n % 10 else [])
    if n < 1000:
        return [_ONES[n // 100], "hundred"] + (number_words(n % 100) if n % 100 else [])
    return number_words(n // 1000) + ["thousand"] + (number_words(n % 1000) if n % 1000 else [])


def parse_number_words(words: Sequence[str]) -> int:
    total = current = 0
    for w in words:
        if w in _ONES:
            current += _ONES.index(w)
        elif w in _TEENS:
            current += 10 + _TEENS.index(w)
        elif w in _TENS:
            current += 10 * _TENS.index(w)
        elif w == "hundred":
            current *= 100
        elif w == "thousand":
            total += current * 1000
            current = 0
        else:
            raise ValueError(f"not a number word: {w!r}")
    return total + current


NUMBER_WORDS = set(_ONES) | set(_TEENS) | set(_TENS[2:]) | {"hundred", "thousand"}


def paraphrase(expr: Sequence[str], template: int) -> list[str]:
    """Spell an expression in words inside one of the fixed templates."""
    nums = literals(expr)
    ops = [t for t in expr if t in OPERATORS]
    words = number_words(nums[0])
    for op, num in zip(ops, nums[1:]):
        words += list(OP_WORDS[op]) + number_words(num)
    prefix, suffix = TEMPLATES[template]
    return list(prefix) + words + list(suffix)


def deparaphrase(words: Sequence[str]) -> list[str]:
    """Inverse of :func:`paraphrase`: recover the symbolic expression tokens."""
    words = list(words)
    for prefix, suffix in TEMPLATES:
        core = words[len(prefix) : len(words) - len(suffix)]
        if words[: len(prefix)] != list(prefix) or (suffix and words[-len(suffix) :] != list(suffix)):
            continue
        if not core or core[0] not in NUMBER_WORDS:
            continue
        out: list[str] = []
        buf: list[str] = []
        i = 0
        while i < len(core):
            w = core[i]
            op = next((o for o, ws in OP_WORDS.items() if tuple(core[i : i + len(ws)]) == ws), None)
            if op is not None:
                out += list(str(parse_number_words(buf))) + [op]
                buf = []
                i += len(OP_WORDS[op])
            else:
                buf.append(w)
                i += 1
        return out + list(str(parse_number_words(buf)))
    raise ValueError("no template matches")


@dataclass(frozen=True)
class RewardConfig:
    lambda_cmp: float = 0.05
    lambda_swap: float = 0.05
    floor: float = -1.0

    def __post_init__(self):
        if self.lambda_cmp < 0 or self.lambda_swap < 0 or self.floor > 0:
            raise ValueError("penalties must be >= 0 and floor <= 0")


@dataclass
class TaskInstance:
    kind: str  # arithmetic, countdown, count, sort, order, compare
    prompt: tuple[str, ...]
    target: tuple[str, ...] = ()
    hidden: HiddenArray | None = None
    metadata: dict = field(default_factory=dict)
    seed: int | None = None
    reward_cfg: RewardConfig = field(default_factory=RewardConfig, repr=False, compare=False)

    @property
    def stop_token(self) -> str:
        return DONE if self.kind == "sort" else END

    def initial_latent(self) -> HiddenArray | None:
        return self.hidden

    def terminal_reward(self, rollout, catalog) -> float:
        if self.kind == "sort":
            return reward_sorting(rollout, self, catalog, self.reward_cfg)
        return reward_em(rollout, self, catalog)

    def to_json(self) -> dict:
        target: Any = list(self.target)
        if self.hidden is not None:
            target = {"values": list(self.hidden.values), "direction": self.hidden.direction, "answer": list(self.target)}
        return {"kind": self.kind, "prompt": list(self.prompt), "target": target, "metadata": self.metadata, "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "TaskInstance":
        target, hidden = obj["target"], None
        if isinstance(target, dict):
            hidden = HiddenArray(tuple(target["values"]), target["direction"])
            target = target.get("answer", [])
        return cls(obj["kind"], tuple(obj["prompt"]), tuple(target), hidden, dict(obj.get("metadata", {})), obj.get("seed"))


# --------------------------------------------------------------------------
# expression sampling


def _random_literal(rng: np.random.Generator, max_digits: int, min_digits: int = 1) -> int:
    d = int(rng.integers(min_digits, max_digits + 1))
    lo = 0 if d == 1 else 10 ** (d - 1)
    return int(rng.integers(lo, 10**d))


def _divisors_upto(v: int, bound: int) -> list[int]:
    v = abs(v)
    if v == 0:
        return list(range(1, bound + 1))
    if v < 2**62:
        cands = np.arange(1, bound + 1, dtype=np.int64)
        return [int(c) for c in cands[v % cands == 0]]
    return [c for c in range(1, min(bound, 1000) + 1) if v % c == 0]


def sample_expression(rng: np.random.Generator, n_ops: int, max_digits: int, min_digits: int = 1,
                      ops: Sequence[str] = OPERATORS) -> list[str]:
    """Random parenthesis-free expression whose divisions are all exact."""
    bound = 10**max_digits - 1
    nums = [_random_literal(rng, max_digits, min_digits)]
    chosen: list[str] = []
    term = Fraction(nums[0])
    for _ in range(n_ops):
        op = ops[int(rng.integers(len(ops)))]
        if op == DIVIDE:
            divs = [d for d in _divisors_upto(int(term), bound) if d >= 10 ** (min_digits - 1)] or [1]
            num = divs[int(rng.integers(len(divs)))]
            term /= num
        else:
            num = _random_literal(rng, max_digits, min_digits)
            term = term * num if op == TIMES else Fraction(num)
        chosen.append(op)
        nums.append(num)
    tokens = list(str(nums[0]))
    for op, num in zip(chosen, nums[1:]):
        tokens += [op] + list(str(num))
    return tokens


def _seed_of(rng: np.random.Generator) -> int:
    return int(rng.integers(2**31))


def gen_arithmetic(cfg: dict, rng: np.random.Generator) -> list[TaskInstance]:
    max_digits = cfg.get("max_digits", 5)
    min_ops, max_ops = cfg.get("min_ops", 2), cfg.get("max_ops", 4)
    if not 1 <= min_ops <= max_ops:
        raise ValueError("need 1 <= min_ops <= max_ops")
    frac = cfg.get("paraphrase_fraction", 0.1)
    ops = tuple(cfg.get("ops", OPERATORS))
    out = []
    for _ in range(cfg.get("n_instances", 1000)):
        seed = _seed_of(rng)
        r = np.random.default_rng(seed)
        n_ops = int(r.integers(min_ops, max_ops + 1))
        expr = sample_expression(r, n_ops, max_digits, cfg.get("min_digits", 1), ops)
        para = bool(r.random() < frac)
        prompt = paraphrase(expr, int(r.integers(len(TEMPLATES)))) if para else expr
        target = render_number(evaluate_expression(expr))
        meta = {"expression": "".join(expr), "operand_count": n_ops + 1, "paraphrased": para, "numbers": literals(expr)}
        out.append(TaskInstance("arithmetic", tuple(prompt), tuple(target), None, meta, seed))
    return out


def countdown_prompt(numbers: Sequence[int], target: int) -> list[str]:
    toks = ["numbers"]
    for k, num in enumerate(numbers):
        if k:
            toks.append(COMMA)
        toks += list(str(num))
    return toks + ["target"] + render_number(target)


def gen_countdown(cfg: dict, rng: np.random.Generator) -> list[TaskInstance]:
    max_digits, max_ops = cfg.get("max_digits", 4), cfg.get("max_ops", 3)
    out = []
    for _ in range(cfg.get("n_instances", 20000)):
        seed = _seed_of(rng)
        r = np.random.default_rng(seed)
        expr = sample_expression(r, int(r.integers(1, max_ops + 1)), max_digits)
        value = evaluate_expression(expr)
        nums = literals(expr)
        r.shuffle(nums)
        meta = {"numbers": nums, "target": int(value), "expression": "".join(expr), "operand_count": len(nums)}
        out.append(TaskInstance("countdown", tuple(countdown_prompt(nums, int(value))), tuple(render_number(value)), None, meta, seed))
    return out


def gen_count(cfg: dict, rng: np.random.Generator) -> list[TaskInstance]:
    max_len = cfg.get("max_len", 20)
    alphabet = tuple(cfg.get("alphabet", COUNT_SYMBOLS))
    out = []
    for _ in range(cfg.get("n_instances", 1000)):
        seed = _seed_of(rng)
        r = np.random.default_rng(seed)
        length = int(r.integers(1, max_len + 1))
        seq = [alphabet[i] for i in r.integers(len(alphabet), size=length)]
        sym = alphabet[int(r.integers(len(alphabet)))]
        prompt = ["count", sym, "in"] + seq
        out.append(TaskInstance("count", tuple(prompt), tuple(render_number(seq.count(sym))), None, {"n": length, "symbol": sym}, seed))
    return out


def sort_prompt(n: int, direction: str) -> list[str]:
    return ["sort", *LABELS[:n], direction]


def sort_instance(values: Sequence[int], direction: str = "asc", seed: int | None = None,
                  reward_cfg: RewardConfig | None = None) -> TaskInstance:
    hidden = HiddenArray(tuple(int(v) for v in values), direction)
    inst = TaskInstance("sort", tuple(sort_prompt(hidden.n, direction)), (), hidden, {"n": hidden.n}, seed)
    if reward_cfg is not None:
        inst.reward_cfg = reward_cfg
    return inst


def _check_mix(mix: dict) -> tuple[list[int], np.ndarray]:
    sizes = [int(k) for k in mix]
    p = np.array([float(v) for v in mix.values()])
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("mix fractions must be non-negative and sum to 1")
    return sizes, p


def gen_sorting(cfg: dict, rng: np.random.Generator) -> list[TaskInstance]:
    sizes, p = _check_mix(cfg.get("mix", SORT_MIX))
    lo, hi = cfg.get("value_range", (0, 99))
    out = []
    for _ in range(cfg.get("n_instances", 80000)):
        seed = _seed_of(rng)
        r = np.random.default_rng(seed)
        n = sizes[int(r.choice(len(sizes), p=p))]
        values = r.choice(np.arange(lo, hi + 1), size=n, replace=False)
        direction = "asc" if r.random() < 0.5 else "desc"
        out.append(sort_instance(values, direction, seed))
    return out


def order_answer(hidden: HiddenArray) -> list[str]:
    idx = sorted(range(hidden.n), key=hidden.values.__getitem__, reverse=hidden.direction == "desc")
    return [hidden.labels[i] for i in idx]


def gen_ordering(cfg: dict, rng: np.random.Generator) -> list[TaskInstance]:
    """Curriculum set: mostly full-order questions, a few single-relation questions."""
    sizes, p = _check_mix(cfg.get("size_mix", ORDER_SIZE_MIX))
    order_fraction = cfg.get("order_fraction", 0.95)
    lo, hi = cfg.get("value_range", (0, 99))
    out = []
    for _ in range(cfg.get("n_instances", 20000)):
        seed = _seed_of(rng)
        r = np.random.default_rng(seed)
        n = sizes[int(r.choice(len(sizes), p=p))]
        values = tuple(int(v) for v in r.choice(np.arange(lo, hi + 1), size=n, replace=False))
        direction = "asc" if r.random() < 0.5 else "desc"
        hidden = HiddenArray(values, direction)
        if r.random() < order_fraction:
            prompt = ["order", *hidden.labels, direction]
            inst = TaskInstance("order", tuple(prompt), tuple(order_answer(hidden)), hidden, {"n": n}, seed)
        else:
            i, j = (int(k) for k in r.choice(n, size=2, replace=False))
            x, y = hidden.labels[i], hidden.labels[j]
            rel = "<" if values[i] < values[j] else ">"
            inst = TaskInstance("compare", ("relation", x, y), (x, rel, y), hidden, {"n": n}, seed)
        out.append(inst)
    return out


GENERATORS = {
    "arithmetic": gen_arithmetic,
    "countdown": gen_countdown,
    "count": gen_count,
    "sort": gen_sorting,
    "order": gen_ordering,
}


# --------------------------------------------------------------------------
# rewards


def answer_span(rollout, catalog) -> list[str] | None:
    """Tokens between the last ``answer`` marker and the terminating ``end`` token."""
    if rollout.terminated_by != "answer_emitted":
        return None
    hist, tags = rollout.final_state.history, rollout.final_state.tags
    if not hist or catalog.vocab[hist[-1]] != END:
        return None
    ans = catalog.token_index.get(ANSWER)
    for k in range(len(hist) - 2, rollout.prompt_len - 1, -1):
        if hist[k] == ans and tags[k] == 0:
            return catalog.decode(hist[k + 1 : -1])
    return None


def verify_countdown_answer(expr_tokens: Sequence[str], numbers: Sequence[int], target) -> bool:
    try:
        value = evaluate_expression(list(expr_tokens))
        used = literals(list(expr_tokens))
    except ExpressionError:
        return False
    return sorted(used) == sorted(int(n) for n in numbers) and value == Fraction(target)


def reward_em(rollout, task: TaskInstance, catalog) -> float:
    span = answer_span(rollout, catalog)
    if span is None:
        return 0.0
    if task.kind == "countdown":
        return float(verify_countdown_answer(span, task.metadata["numbers"], task.metadata["target"]))
    return float(tuple(span) == tuple(task.target))


def comparison_budget(n: int) -> int:
    return OPTIMAL_WORST_COMPARISONS[n]


def reward_sorting(rollout, task: TaskInstance, catalog, cfg: RewardConfig = RewardConfig()) -> float:
    """1 for a sorted final array (episode ended by ``done``), minus excess-work penalties."""
    z = rollout.final_state.latent
    base = 1.0 if rollout.terminated_by == "answer_emitted" and z.is_sorted() else 0.0
    exits = rollout.final_state.exits
    n_cmp = exits.get(_env_or_none(catalog, "compare"), 0)
    n_swp = exits.get(_env_or_none(catalog, "swap"), 0)
    s_min = min_swap_count(task.hidden.ranks(), task.hidden.direction)
    penalty = cfg.lambda_cmp * max(0, n_cmp - comparison_budget(task.hidden.n)) + cfg.lambda_swap * max(0, n_swp - s_min)
    return max(cfg.floor, base - penalty)


def _env_or_none(catalog, name: str):
    try:
        return catalog.env_id(name)
    except KeyError:
        return None


# --------------------------------------------------------------------------
# dataset I/O


def dumps_jsonl(instances: Iterable[TaskInstance]) -> str:
    return "".join(json.dumps(t.to_json(), ensure_ascii=False, sort_keys=True) + "\n" for t in instances)


def write_jsonl(path, instances: Iterable[TaskInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_jsonl(instances))


def read_jsonl(path) -> list[TaskInstance]:
    """Load instances, including externally supplied ones with the same schema."""
    with open(path, encoding="utf-8") as fh:
        return [TaskInstance.from_json(json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# vocabulary and pretraining corpora


def default_vocab() -> list[str]:
    words = set()
    for prefix, suffix in TEMPLATES:
        words.update(prefix, suffix)
    for ws in OP_WORDS.values():
        words.update(ws)
    words |= NUMBER_WORDS
    base = list(DIGITS) + list(OPERATORS) + ["=", "/", "ERR", COMMA, ANSWER, END, DONE, "numbers", "target", "count", "in",
                                             "sort", "order", "relation", "asc", "desc", "<", ">", "swapped",
                                             "calculate", "compare", "swap"]
    base += list(LABELS) + list(COUNT_SYMBOLS)
    return base + sorted(words - set(base))


def tool_trace(expr: Sequence[str], route_word: str = "calculate") -> list[str]:
    """The history a correct calculator invocation leaves behind."""
    return [route_word, *expr] + ["="] + render_number(evaluate_expression(list(expr)))


def arithmetic_corpus(instances: Sequence[TaskInstance], rng: np.random.Generator, tool_fraction: float = 0.05) -> list[list[str]]:
    """Language-model text: mostly direct answers, occasionally a worked calculator trace."""
    corpus = []
    for inst in instances:
        seq = list(inst.prompt)
        if rng.random() < tool_fraction:
            seq += tool_trace(list(inst.metadata["expression"]))
        corpus.append(seq + [ANSWER, *inst.target, END])
    return corpus


def _compare_text(z: HiddenArray, i: int, j: int) -> list[str]:
    x, y = z.labels[i], z.labels[j]
    return ["compare", x, y, x, "<" if z.values[i] < z.values[j] else ">", y]


def _swap_text(z: HiddenArray, i: int, j: int) -> list[str]:
    x, y = z.labels[i], z.labels[j]
    return ["swap", x, y, "swapped", x, y]


def insertion_transcript(z: HiddenArray) -> list[str]:
    """Textbook insertion sort written out as compare/swap text with truthful results."""
    out = []
    desc = z.direction == "desc"
    for k in range(1, z.n):
        j = k
        while j > 0:
            out += _compare_text(z, j - 1, j)
            if (z.values[j - 1] > z.values[j]) != desc:
                out += _swap_text(z, j - 1, j)
                z = z.swapped(j - 1, j)
                j -= 1
            else:
                break
    return out


def sorting_corpus(instances: Sequence[TaskInstance], rng: np.random.Generator, max_ops: int = 6,
                   procedural_fraction: float = 0.0) -> list[list[str]]:
    """Language-model text about sorting, with truthful observations throughout.

    Each interaction names its pair before the result (``compare A B A < B``),
    the way a written record would, so a language model trained on it expects
    two distinct labels after ``compare``. A ``procedural_fraction`` of the
    transcripts are insertion-sort walkthroughs; the rest are random
    compare/swap sequences.
    """
    corpus = []
    for inst in instances:
        z = inst.hidden
        seq = list(inst.prompt)
        if rng.random() < procedural_fraction:
            seq += insertion_transcript(z)
        else:
            for _ in range(int(rng.integers(0, max_ops + 1))):
                i, j = (int(k) for k in rng.choice(z.n, size=2, replace=False))
                if rng.random() < 0.5:
                    seq += _compare_text(z, i, j)
                else:
                    seq += _swap_text(z, i, j)
                    z = z.swapped(i, j)
        corpus.append(seq + [DONE])
    return corpus


def task_catalog(kind: str, n_labels: int = 5, vocab: Sequence[str] | str | None = None) -> ActionCatalog:
    """A compact action catalog for one task family.

    Sorting gets the compare and swap environments over ``n_labels`` labels;
    everything else gets the calculator. ``vocab="default"`` swaps the compact
    vocabulary for :func:`default_vocab`, which covers every generator's prompts.
    """
    if vocab == "default":
        vocab = default_vocab()
    if kind in ("sort", "sorting", "order", "ordering"):
        labels = LABELS[:n_labels]
        base = ["sort", "order", "relation", *labels, "asc", "desc", "<", ">", "swapped", ANSWER, END, DONE, ERR,
                "compare", "swap"]
        return ActionCatalog(vocab or base, [Compare(labels), Swap(labels)])
    base = [*CALC_BUTTONS, "/", ERR, ANSWER, END, "calculate"]
    return ActionCatalog(vocab or base, [Calculator()])
