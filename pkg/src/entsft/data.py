"""Synthetic, machine-verifiable training corpora.

Three character-level tasks: copy, reverse, and multi_digit_add. The add
task writes out digit-by-digit carry steps before the final answer, e.g.

    17+25  ->  "7+5=12 carry 1; 1+2+1=4; ANSWER=42"

so a sequence mixes structural positions (step boundaries, the ANSWER
branch) with digit positions that are simple copies from the prompt.
A verifier checks only the final answer segment, never the steps.

Token ids: <SEP>=0, <END>=1, <PAD>=2, then the task alphabet in codepoint
order. Generation is pure given the seed; train and eval splits are
disjoint by problem instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SEP, END, PAD = 0, 1, 2

TASKS = ("copy", "reverse", "multi_digit_add")

_ADD_ALPHABET = "".join(sorted(set("0123456789+=; carry1ANSWER")))
_LETTER_ALPHABET = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class Vocab:
    """Character vocabulary with the three reserved ids up front."""

    chars: str

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("vocabulary characters must be unique")

    @property
    def size(self) -> int:
        return len(self.chars) + 3

    def encode(self, text: str) -> list[int]:
        base = {c: i + 3 for i, c in enumerate(self.chars)}
        try:
            return [base[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids, stop_at_end: bool = True) -> str:
        out = []
        for t in ids:
            t = int(t)
            if t == END and stop_at_end:
                break
            if t in (SEP, END, PAD):
                continue
            out.append(self.chars[t - 3])
        return "".join(out)


def vocab_for_task(task: str) -> Vocab:
    if task == "multi_digit_add":
        return Vocab(_ADD_ALPHABET)
    if task in ("copy", "reverse"):
        return Vocab(_LETTER_ALPHABET)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass
class TaskSpec:
    task: str
    low: int = 2            # digits per operand (add) or string length (copy/reverse)
    high: int = 4
    n_train: int = 20000
    n_eval: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not 1 <= self.low <= self.high:
            raise ValueError(f"need 1 <= low <= high, got {self.low}..{self.high}")
        if self.n_train < 1 or self.n_eval < 0:
            raise ValueError("n_train must be >= 1 and n_eval >= 0")

    @property
    def vocab(self) -> Vocab:
        return vocab_for_task(self.task)


@dataclass
class Example:
    prompt: str
    response: str
    answer: str


def add_response(a: int, b: int) -> tuple[str, str]:
    """Digit-by-digit carry steps plus the final answer for a + b."""
    answer = str(a + b)
    da = str(a)[::-1]
    db = str(b)[::-1]
    width = max(len(da), len(db))
    da = da.ljust(width, "0")
    db = db.ljust(width, "0")
    steps = []
    carry = 0
    for i in range(width):
        x, y = int(da[i]), int(db[i])
        s = x + y + carry
        term = f"{x}+{y}" + ("+1" if carry else "") + f"={s}"
        carry = 1 if s >= 10 else 0
        if carry:
            term += " carry 1"
        steps.append(term)
    steps.append(f"ANSWER={answer}")
    return "; ".join(steps), answer


def _number_with_digits(rng: np.random.Generator, digits: int) -> int:
    lo = 1 if digits == 1 else 10 ** (digits - 1)
    return int(rng.integers(lo, 10 ** digits))


def _make_add(rng: np.random.Generator, spec: TaskSpec) -> Example:
    a = _number_with_digits(rng, int(rng.integers(spec.low, spec.high + 1)))
    b = _number_with_digits(rng, int(rng.integers(spec.low, spec.high + 1)))
    response, answer = add_response(a, b)
    return Example(prompt=f"{a}+{b}", response=response, answer=answer)


def _make_string(rng: np.random.Generator, spec: TaskSpec) -> Example:
    length = int(rng.integers(spec.low, spec.high + 1))
    s = "".join(_LETTER_ALPHABET[int(i)] for i in rng.integers(0, 26, size=length))
    out = s if spec.task == "copy" else s[::-1]
    return Example(prompt=s, response=out, answer=out)


@dataclass
class Dataset:
    spec: TaskSpec
    train: list = field(default_factory=list)
    eval: list = field(default_factory=list)

    @property
    def vocab(self) -> Vocab:
        return self.spec.vocab


def generate(spec: TaskSpec) -> Dataset:
    """Deterministic dataset with train/eval disjoint by problem instance."""
    rng = np.random.default_rng(spec.seed)
    make = _make_add if spec.task == "multi_digit_add" else _make_string
    seen: set[str] = set()
    examples: list[Example] = []
    needed = spec.n_train + spec.n_eval
    attempts = 0
    while len(examples) < needed:
        attempts += 1
        if attempts > 200 * needed:
            raise ValueError(
                f"could not draw {needed} distinct instances for {spec.task} "
                f"range {spec.low}..{spec.high}; range too small"
            )
        ex = make(rng, spec)
        if ex.prompt in seen:
            continue
        seen.add(ex.prompt)
        examples.append(ex)
    return Dataset(spec=spec, train=examples[: spec.n_train], eval=examples[spec.n_train:])


def verify(task: str, prompt: str, completion: str) -> bool:
    """True iff the final answer segment of the completion matches the
    ground truth computed from the prompt. Intermediate steps are ignored;
    anything unparseable is simply wrong."""
    if task == "multi_digit_add":
        try:
            a_str, b_str = prompt.split("+")
            truth = int(a_str) + int(b_str)
        except ValueError:
            return False
        marker = "ANSWER="
        pos = completion.rfind(marker)
        if pos < 0:
            return False
        digits = ""
        for c in completion[pos + len(marker):]:
            if c.isdigit():
                digits += c
            else:
                break
        if not digits:
            return False
        return int(digits) == truth
    if task == "copy":
        return completion == prompt
    if task == "reverse":
        return completion == prompt[::-1]
    raise ValueError(f"unknown task {task!r}")


def encode_example(example: Example, vocab: Vocab) -> tuple[list[int], list[bool]]:
    """Token ids [prompt, SEP, response, END] and the loss mask, which is
    true exactly on the response tokens and the END token."""
    prompt_ids = vocab.encode(example.prompt)
    response_ids = vocab.encode(example.response)
    ids = prompt_ids + [SEP] + response_ids + [END]
    mask = [False] * (len(prompt_ids) + 1) + [True] * (len(response_ids) + 1)
    return ids, mask


def pad_batch(encoded: list[tuple[list[int], list[bool]]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad a list of (ids, mask) to the batch maximum length."""
    width = max(len(ids) for ids, _ in encoded)
    tokens = np.full((len(encoded), width), PAD, dtype=np.int64)
    mask = np.zeros((len(encoded), width), dtype=bool)
    for i, (ids, m) in enumerate(encoded):
        tokens[i, : len(ids)] = ids
        mask[i, : len(m)] = m
    return tokens, mask


# ---------------------------------------------------------------------------
# Dataset files: line-delimited JSON records {prompt, response, answer},
# with a meta.json sidecar recording the generating spec.
# ---------------------------------------------------------------------------


def write_dataset(dataset: Dataset, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split_name, examples in (("train", dataset.train), ("eval", dataset.eval)):
        path = out / f"{split_name}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for ex in examples:
                fh.write(json.dumps(
                    {"prompt": ex.prompt, "response": ex.response, "answer": ex.answer},
                    sort_keys=True) + "\n")
        paths[split_name] = str(path)
    spec = dataset.spec
    meta = {
        "task": spec.task,
        "low": spec.low,
        "high": spec.high,
        "n_train": spec.n_train,
        "n_eval": spec.n_eval,
        "seed": spec.seed,
        "vocab_chars": dataset.vocab.chars,
    }
    meta_path = out / "meta.json"
    with open(meta_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    paths["meta"] = str(meta_path)
    return paths


def read_examples(path) -> list[Example]:
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            examples.append(Example(rec["prompt"], rec["response"], rec["answer"]))
    return examples


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    meta_path = data_dir / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no meta.json under {data_dir}")
    meta = json.loads(meta_path.read_text())
    spec = TaskSpec(
        task=meta["task"], low=meta["low"], high=meta["high"],
        n_train=meta["n_train"], n_eval=meta["n_eval"], seed=meta["seed"],
    )
    return Dataset(
        spec=spec,
        train=read_examples(data_dir / "train.jsonl"),
        eval=read_examples(data_dir / "eval.jsonl"),
    )
