"""Evaluation-time diagnostics: teacher-forced token entropy, pass@k /
avg@k over nucleus samples, and n-gram diversity.

Generation here is batched across prompts purely for speed; per-sample
seeds are derived from (seed, prompt index, sample index) so results do not
depend on how prompts are grouped into batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .dist import entropy_topk_rows
from .model import ModelConfig, _nucleus_pick, forward


def _masked_rows(params, cfg: ModelConfig, vocab, examples, chunk: int = 128):
    """Teacher-forced logit rows at response positions, chunked to bound memory.

    Yields (rows, targets) per chunk where rows[i] predicts targets[i].
    """
    for start in range(0, len(examples), chunk):
        batch = examples[start:start + chunk]
        encoded = [data_mod.encode_example(ex, vocab) for ex in batch]
        tokens, mask = data_mod.pad_batch(encoded)
        logits = forward(params, tokens, cfg)
        rows = logits[:, :-1, :][mask[:, 1:]]
        targets = tokens[:, 1:][mask[:, 1:]]
        yield rows, targets


def eval_entropy(params, cfg: ModelConfig, vocab, examples, k_top: int = 512) -> float:
    """Mean top-k token entropy (nats) at expert-response positions."""
    if not examples:
        raise ValueError("eval_entropy needs at least one example")
    total, count = 0.0, 0
    for rows, _ in _masked_rows(params, cfg, vocab, examples):
        total += float(entropy_topk_rows(rows, 1.0, k_top).sum())
        count += rows.shape[0]
    return total / count


def eval_entropy_stats(params, cfg: ModelConfig, vocab, examples,
                       k_top: int = 512, top_fraction: float = 0.2) -> dict:
    """Mean entropy plus the split between the highest-entropy fraction of
    positions and the rest (the 20/80 view of token roles)."""
    ent_chunks = []
    for rows, _ in _masked_rows(params, cfg, vocab, examples):
        ent_chunks.append(entropy_topk_rows(rows, 1.0, k_top))
    ent = np.concatenate(ent_chunks)
    order = np.argsort(-ent, kind="stable")
    cut = max(1, int(np.ceil(top_fraction * ent.shape[0])))
    top = ent[order[:cut]]
    bottom = ent[order[cut:]] if cut < ent.shape[0] else np.array([0.0])
    return {
        "mean_entropy": float(ent.mean()),
        "top_fraction_mean": float(top.mean()),
        "bottom_fraction_mean": float(bottom.mean()),
        "n_positions": int(ent.shape[0]),
    }


def batched_greedy(params, cfg: ModelConfig, prompts: list[list[int]], max_new: int,
                   end_token: int | None = None) -> list[list[int]]:
    """Greedy decode of many prompts at once; equals per-prompt decoding."""
    return _batched_decode(params, cfg, prompts, max_new, end_token, None, None, None)


def batched_sample(params, cfg: ModelConfig, prompts: list[list[int]], max_new: int,
                   tau: float, top_p: float, seeds, end_token: int | None = None) -> list[list[int]]:
    """Nucleus-sample many prompts at once with one seed per prompt."""
    if len(seeds) != len(prompts):
        raise ValueError("need one seed per prompt")
    return _batched_decode(params, cfg, prompts, max_new, end_token, tau, top_p, seeds)


def _batched_decode(params, cfg, prompts, max_new, end_token, tau, top_p, seeds):
    if not prompts:
        return []
    lengths = [len(p) for p in prompts]
    if max(lengths) > cfg.context_len:
        raise ValueError("a prompt exceeds the model context")
    n = len(prompts)
    cap = min(cfg.context_len, max(lengths) + max_new)
    tokens = np.full((n, cap), data_mod.PAD, dtype=np.int64)
    for i, p in enumerate(prompts):
        tokens[i, : len(p)] = p
    cur = np.array(lengths, dtype=np.int64)
    budget = np.array([min(max_new, cap - L) for L in lengths], dtype=np.int64)
    active = budget > 0
    rngs = None if seeds is None else [np.random.default_rng(s) for s in seeds]

    while active.any():
        rows = np.flatnonzero(active)
        width = int(cur[rows].max())
        logits = forward(params, tokens[rows, :width], cfg)
        for j, i in enumerate(rows):
            last = logits[j, cur[i] - 1]
            if rngs is None:
                nxt = int(np.argmax(last))
            else:
                nxt = _nucleus_pick(last, tau, top_p, rngs[i])
            tokens[i, cur[i]] = nxt
            cur[i] += 1
            budget[i] -= 1
            if budget[i] <= 0 or cur[i] >= cap or (end_token is not None and nxt == end_token):
                active[i] = False
    return [tokens[i, : cur[i]].tolist() for i in range(n)]


@dataclass
class PassRates:
    pass_at_k: float
    avg_at_k: float
    k: int
    n_prompts: int


def pass_at_k(params, cfg: ModelConfig, vocab, task: str, examples, k: int,
              tau: float, top_p: float, seed: int, chunk: int = 64) -> PassRates:
    """Fraction of prompts with >= 1 verified sample among k nucleus samples,
    plus the mean per-sample verify rate (avg@k)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not examples:
        raise ValueError("pass_at_k needs at least one example")
    max_new = _response_budget(cfg, vocab, examples)
    any_pass = np.zeros(len(examples), dtype=bool)
    n_correct = 0
    jobs = [(i, j) for i in range(len(examples)) for j in range(k)]
    for start in range(0, len(jobs), chunk):
        part = jobs[start:start + chunk]
        prompts = [vocab.encode(examples[i].prompt) + [data_mod.SEP] for i, _ in part]
        seeds = [np.random.SeedSequence((seed, i, j)) for i, j in part]
        outs = batched_sample(params, cfg, prompts, max_new, tau, top_p, seeds,
                              end_token=data_mod.END)
        for (i, _), prompt, out in zip(part, prompts, outs):
            completion = vocab.decode(out[len(prompt):])
            ok = data_mod.verify(task, examples[i].prompt, completion)
            n_correct += int(ok)
            any_pass[i] |= ok
    return PassRates(
        pass_at_k=float(any_pass.mean()),
        avg_at_k=n_correct / (len(examples) * k),
        k=k,
        n_prompts=len(examples),
    )


def greedy_accuracy(params, cfg: ModelConfig, vocab, task: str, examples,
                    chunk: int = 256) -> float:
    """Fraction of prompts whose greedy completion verifies."""
    if not examples:
        raise ValueError("greedy_accuracy needs at least one example")
    max_new = _response_budget(cfg, vocab, examples)
    correct = 0
    for start in range(0, len(examples), chunk):
        batch = examples[start:start + chunk]
        prompts = [vocab.encode(ex.prompt) + [data_mod.SEP] for ex in batch]
        outs = batched_greedy(params, cfg, prompts, max_new, end_token=data_mod.END)
        for ex, prompt, out in zip(batch, prompts, outs):
            completion = vocab.decode(out[len(prompt):])
            correct += int(data_mod.verify(task, ex.prompt, completion))
    return correct / len(examples)


def _response_budget(cfg: ModelConfig, vocab, examples) -> int:
    """Decode budget: longest expert response plus slack, capped by context."""
    longest = max(len(ex.response) for ex in examples)
    return min(cfg.context_len, longest + 9)


def ngram_diversity(samples_per_prompt, n: int = 4) -> float:
    """1 - mean pairwise n-gram Jaccard similarity across each prompt's
    samples, averaged over prompts.

    A pair involving a sequence shorter than n falls back to whole-sequence
    identity: similarity 1 if the token sequences are equal, else 0.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not samples_per_prompt:
        raise ValueError("need at least one prompt's samples")
    sims = []
    for samples in samples_per_prompt:
        if len(samples) < 2:
            raise ValueError("need >= 2 samples per prompt")
        grams = [frozenset(tuple(s[i:i + n]) for i in range(len(s) - n + 1)) for s in samples]
        pair_sims = []
        for a in range(len(samples)):
            for b in range(a + 1, len(samples)):
                if not grams[a] or not grams[b]:
                    pair_sims.append(1.0 if list(samples[a]) == list(samples[b]) else 0.0)
                    continue
                inter = len(grams[a] & grams[b])
                union = len(grams[a] | grams[b])
                pair_sims.append(inter / union)
        sims.append(float(np.mean(pair_sims)))
    return 1.0 - float(np.mean(sims))


def sample_diversity(params, cfg: ModelConfig, vocab, examples, k: int,
                     tau: float, top_p: float, seed: int, n: int = 4,
                     chunk: int = 64) -> float:
    """n-gram diversity over k nucleus samples per prompt (generated ids only)."""
    per_prompt = []
    for i, ex in enumerate(examples):
        prompt = vocab.encode(ex.prompt) + [data_mod.SEP]
        per_prompt.append((i, prompt))
    outs_by_prompt = [[] for _ in examples]
    jobs = [(i, j) for i in range(len(examples)) for j in range(k)]
    max_new = _response_budget(cfg, vocab, examples)
    for start in range(0, len(jobs), chunk):
        part = jobs[start:start + chunk]
        prompts = [per_prompt[i][1] for i, _ in part]
        seeds = [np.random.SeedSequence((seed, i, j)) for i, j in part]
        outs = batched_sample(params, cfg, prompts, max_new, tau, top_p, seeds,
                              end_token=data_mod.END)
        for (i, _), prompt, out in zip(part, prompts, outs):
            outs_by_prompt[i].append(out[len(prompt):])
    return ngram_diversity(outs_by_prompt, n=n)
