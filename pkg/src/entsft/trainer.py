"""Training loop: per-step pipeline, optimizer, metrics, checkpoints.

One step runs, in order: student forward, teacher logits, per-token base
entropy, gated entropy increments, temperature search, tempered teacher
log-probabilities, combined loss and its logit gradient, backward pass,
clipped AdamW update, then the periodic teacher EMA sync. Non-distillation
regularizers replace the teacher/search stage with their own term.

Determinism contract: two runs with the same config and seed produce
byte-identical metrics files. Per-step wall time is therefore written to a
separate timings file instead of the metrics records.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evalmetrics
from .dist import entropy_topk_rows
from .losses import Regularizer, total_loss
from .model import ModelConfig, backward_from_cache, forward, forward_with_cache, init_params
from .teacher import TeacherState, init_teacher, maybe_sync, teacher_logits
from .tempsearch import GateConfig, TempSearchConfig, plan_batch


class ConfigError(ValueError):
    """Bad or inconsistent configuration (CLI exit code 2)."""


class TrainingAbort(RuntimeError):
    """Non-finite loss or gradient; a diagnostic snapshot has been written."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelSection:
    """Model knobs inside a training config; vocab_size 0 means 'use the
    dataset vocabulary'."""

    vocab_size: int = 0
    context_len: int = 96
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    head_init: str = "zero"
    tie_embeddings: bool = False

    def resolve(self, vocab_size: int, seed: int) -> ModelConfig:
        size = self.vocab_size or vocab_size
        if self.vocab_size and self.vocab_size != vocab_size:
            raise ConfigError(
                f"configured vocab_size {self.vocab_size} != dataset vocab {vocab_size}"
            )
        return ModelConfig(
            vocab_size=size, context_len=self.context_len, d_model=self.d_model,
            n_layers=self.n_layers, n_heads=self.n_heads, seed=seed,
            head_init=self.head_init, tie_embeddings=self.tie_embeddings,
        )


@dataclass
class OptimizerConfig:
    kind: str = "adamw"
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    warmup_steps: int = 100
    schedule: str = "cosine"  # "cosine" or "constant"
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.kind != "adamw":
            raise ConfigError(f"unsupported optimizer kind {self.kind!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unsupported schedule {self.schedule!r}")


@dataclass
class TeacherSection:
    sync_every_n: int = 5
    decay_mu: float = 0.99
    mode: str = "separate"  # "separate" or "shared"


@dataclass
class RegularizerSection:
    kind: str = "none"  # none | entropy | entropy_top_fraction | kl_to_base | sed
    alpha: float = 1.0
    top_fraction: float = 0.2
    fixed_tau: float | None = None  # bypass the adaptive search when set
    student_tau: float = 1.0

    def __post_init__(self):
        Regularizer(self.kind, self.top_fraction)  # validates kind/fraction
        if self.fixed_tau is not None and self.fixed_tau <= 0:
            raise ConfigError(f"fixed_tau must be > 0, got {self.fixed_tau}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")


@dataclass
class EvalSection:
    every: int = 200                # steps between periodic evals
    n_prompts: int = 256            # final greedy-accuracy prompt count
    n_prompts_periodic: int = 64    # during-training greedy subset
    avg_prompts: int = 96           # prompts for the final avg@k estimate
    samples_per_prompt: int = 8
    diversity_prompts: int = 64
    sample_tau: float = 0.6
    top_p: float = 0.95
    ngram_n: int = 4


@dataclass
class TrainConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"
    epochs: int = 3
    max_steps: int | None = None
    batch_size: int = 64
    seed: int = 0
    eval_every: int = 200
    checkpoint_every: int = 0       # 0 = final checkpoint only
    model: ModelSection = field(default_factory=ModelSection)
    gate: GateConfig = field(default_factory=GateConfig)
    search: TempSearchConfig = field(default_factory=TempSearchConfig)
    regularizer: RegularizerSection = field(default_factory=RegularizerSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")


_SECTION_TYPES = {
    "model": ModelSection,
    "gate": GateConfig,
    "search": TempSearchConfig,
    "regularizer": RegularizerSection,
    "teacher": TeacherSection,
    "optimizer": OptimizerConfig,
    "eval": EvalSection,
}


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def _build_section(cls, payload, path):
    if not isinstance(payload, dict):
        raise ConfigError(f"config section {path!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - names)
    if unknown:
        raise ConfigError(f"unknown config keys under {path!r}: {unknown}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config under {path!r}: {exc}") from exc


def config_from_dict(payload: dict) -> TrainConfig:
    """Strict construction: unknown keys anywhere are rejected."""
    if not isinstance(payload, dict):
        raise ConfigError("config root must be an object")
    names = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(payload) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    kwargs = {}
    for key, value in payload.items():
        if key in _SECTION_TYPES:
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config_file(path) -> TrainConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(payload)


def config_hash(cfg: TrainConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    step: int
    loss_sft: float
    loss_reg: float
    loss_total: float
    mean_token_entropy: float   # nats, top-k
    mean_increment: float       # nats
    mean_tau_hat: float
    clamped_fraction: float
    grad_norm: float
    learning_rate: float
    wall_ms: float

    def to_json(self) -> str:
        # wall_ms goes to the timings sidecar so metrics stay bit-reproducible.
        rec = dataclasses.asdict(self)
        rec.pop("wall_ms")
        rec["mean_token_entropy"] = round(rec["mean_token_entropy"], 6)
        rec["mean_increment"] = round(rec["mean_increment"], 6)
        return json.dumps(rec, sort_keys=True)


# ---------------------------------------------------------------------------
# Checkpoints: magic + uint64 header length + JSON manifest + raw buffers
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"ENTSFT01"


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        buf = little.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": little.dtype.str,
            "offset": offset,
            "nbytes": len(buf),
        })
        offset += len(buf)
        blobs.append(buf)
    header = dict(meta)
    header["format_version"] = 1
    header["arrays"] = entries
    header_bytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for buf in blobs:
            fh.write(buf)


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + header_len].decode())
    base = 16 + header_len
    arrays = {}
    for entry in header.pop("arrays"):
        start = base + entry["offset"]
        buf = raw[start:start + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return arrays, header


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def init_opt_state(params: dict) -> dict:
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
        "t": 0,
    }


def adamw_step(params: dict, grads: dict, opt: dict, ocfg: OptimizerConfig, lr: float) -> None:
    opt["t"] += 1
    t = opt["t"]
    b1, b2 = ocfg.beta1, ocfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = opt["m"][name]
        v = opt["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + 1e-8)
        if ocfg.weight_decay and p.ndim > 1:  # no decay on gains/biases
            update = update + ocfg.weight_decay * p
        p -= lr * update


def lr_at(step: int, total_steps: int, ocfg: OptimizerConfig) -> float:
    """Linear warmup then (optionally) cosine decay to zero; step counts from 1."""
    base = ocfg.learning_rate
    warm = min(ocfg.warmup_steps, total_steps)
    if warm > 0 and step <= warm:
        return base * step / warm
    if ocfg.schedule == "constant" or total_steps <= warm:
        return base
    progress = (step - warm) / (total_steps - warm)
    return base * 0.5 * (1.0 + np.cos(np.pi * progress))


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# Trainer state and the per-step pipeline
# ---------------------------------------------------------------------------


@dataclass
class TrainerState:
    cfg: TrainConfig
    model_cfg: ModelConfig
    vocab: data_mod.Vocab
    task: str
    params: dict
    teacher: TeacherState | None
    base_params: dict | None
    opt: dict
    step: int = 0
    total_steps: int = 0


def init_state(cfg: TrainConfig, dataset: data_mod.Dataset) -> TrainerState:
    vocab = dataset.vocab
    model_cfg = cfg.model.resolve(vocab.size, cfg.seed)
    params = init_params(model_cfg)
    kind = cfg.regularizer.kind
    teacher = None
    base_params = None
    if kind == "sed":
        teacher = init_teacher(
            params, cfg.teacher.sync_every_n, cfg.teacher.decay_mu, cfg.teacher.mode)
    elif kind == "kl_to_base":
        base_params = {k: v.copy() for k, v in params.items()}
    return TrainerState(
        cfg=cfg, model_cfg=model_cfg, vocab=vocab, task=dataset.spec.task,
        params=params, teacher=teacher, base_params=base_params,
        opt=init_opt_state(params), step=0,
    )


def train_step(state: TrainerState, tokens: np.ndarray, mask: np.ndarray,
               out_dir: Path | None = None) -> MetricsRecord:
    """One optimizer step over one padded batch. Mutates state in place."""
    t0 = time.perf_counter()
    cfg = state.cfg
    rcfg = cfg.regularizer
    step_next = state.step + 1

    logits, cache = forward_with_cache(state.params, tokens, state.model_cfg)
    pred_mask = mask[:, 1:]
    rows = logits[:, :-1, :][pred_mask]
    targets = tokens[:, 1:][pred_mask]
    if rows.shape[0] == 0:
        raise ValueError("batch has no response positions to train on")

    mean_increment = 0.0
    mean_tau_hat = 0.0
    clamped_fraction = 0.0
    kwargs = {}
    kind = rcfg.kind
    if kind == "sed":
        t_logits = teacher_logits(
            state.teacher, tokens,
            lambda p, x: forward(p, x, state.model_cfg),
            student_logits=logits,
        )
        t_rows = t_logits[:, :-1, :][pred_mask]
        if rcfg.fixed_tau is not None:
            plans = [float(rcfg.fixed_tau)] * rows.shape[0]
            mean_tau_hat = float(rcfg.fixed_tau)
        else:
            plans = plan_batch(t_rows, cfg.gate, cfg.search)
            mean_increment = float(np.mean([p.increment for p in plans]))
            mean_tau_hat = float(np.mean([p.solved_tau for p in plans]))
            clamped_fraction = float(np.mean([p.clamped for p in plans]))
        kwargs = dict(teacher_rows=t_rows, plans=plans, student_tau=rcfg.student_tau)
        reg = Regularizer("sed")
    elif kind == "kl_to_base":
        b_logits = forward(state.base_params, tokens, state.model_cfg)
        kwargs = dict(base_rows=b_logits[:, :-1, :][pred_mask])
        reg = Regularizer("kl_to_base")
    elif kind == "entropy_top_fraction":
        reg = Regularizer(kind, rcfg.top_fraction)
    else:
        reg = Regularizer(kind)

    breakdown, grad_rows = total_loss(rows, targets, reg, rcfg.alpha, **kwargs)
    mean_entropy = float(entropy_topk_rows(rows, 1.0, cfg.search.top_k).mean())

    upstream = np.zeros_like(logits)
    upstream[:, :-1, :][pred_mask] = grad_rows
    grads = backward_from_cache(state.params, cache, upstream, state.model_cfg)

    finite = np.isfinite(breakdown.total) and all(
        np.all(np.isfinite(g)) for g in grads.values())
    if not finite:
        snap = None
        if out_dir is not None:
            snap = Path(out_dir) / f"abort_step{step_next}.npz"
            np.savez(snap, tokens=tokens, mask=mask, step=step_next)
        raise TrainingAbort(
            f"non-finite loss or gradient at step {step_next}"
            + (f"; batch snapshot at {snap}" if snap else ""))

    norm = global_grad_norm(grads)
    clip = cfg.optimizer.grad_clip
    if clip and norm > clip:
        scale = clip / norm
        for g in grads.values():
            g *= scale
    lr = lr_at(step_next, state.total_steps, cfg.optimizer)
    adamw_step(state.params, grads, state.opt, cfg.optimizer, lr)
    state.step = step_next
    if state.teacher is not None:
        maybe_sync(state.teacher, state.params, state.step)

    return MetricsRecord(
        step=state.step,
        loss_sft=breakdown.sft,
        loss_reg=breakdown.regularizer,
        loss_total=breakdown.total,
        mean_token_entropy=mean_entropy,
        mean_increment=mean_increment,
        mean_tau_hat=mean_tau_hat,
        clamped_fraction=clamped_fraction,
        grad_norm=norm,
        learning_rate=lr,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
    )


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, epoch)))
    return rng.permutation(n)


def _run_eval(state: TrainerState, dataset: data_mod.Dataset, final: bool) -> dict:
    cfg = state.cfg
    ecfg = cfg.eval
    stats = evalmetrics.eval_entropy_stats(
        state.params, state.model_cfg, state.vocab, dataset.eval,
        k_top=cfg.search.top_k)
    n_greedy = ecfg.n_prompts if final else ecfg.n_prompts_periodic
    greedy = evalmetrics.greedy_accuracy(
        state.params, state.model_cfg, state.vocab, state.task,
        dataset.eval[:n_greedy])
    record = {
        "step": state.step,
        "eval_entropy": round(stats["mean_entropy"], 6),
        "entropy_top20": round(stats["top_fraction_mean"], 6),
        "entropy_bottom80": round(stats["bottom_fraction_mean"], 6),
        "greedy_accuracy": greedy,
        "greedy_prompts": n_greedy,
        "final": final,
    }
    if final:
        rates = evalmetrics.pass_at_k(
            state.params, state.model_cfg, state.vocab, state.task,
            dataset.eval[:ecfg.avg_prompts], ecfg.samples_per_prompt,
            ecfg.sample_tau, ecfg.top_p, cfg.seed)
        diversity = evalmetrics.sample_diversity(
            state.params, state.model_cfg, state.vocab,
            dataset.eval[:ecfg.diversity_prompts], ecfg.samples_per_prompt,
            ecfg.sample_tau, ecfg.top_p, cfg.seed, n=ecfg.ngram_n)
        record.update({
            "pass_at_k": rates.pass_at_k,
            "avg_at_k": rates.avg_at_k,
            "k": rates.k,
            "avg_prompts": rates.n_prompts,
            "ngram_diversity": diversity,
        })
    return record


def _checkpoint_arrays(state: TrainerState) -> dict:
    arrays = {f"student/{k}": v for k, v in state.params.items()}
    if state.teacher is not None and state.teacher.mode == "separate":
        arrays.update({f"teacher/{k}": v for k, v in state.teacher.params.items()})
    if state.base_params is not None:
        arrays.update({f"base/{k}": v for k, v in state.base_params.items()})
    arrays.update({f"opt/m/{k}": v for k, v in state.opt["m"].items()})
    arrays.update({f"opt/v/{k}": v for k, v in state.opt["v"].items()})
    return arrays


def save_state(state: TrainerState, path) -> None:
    meta = {
        "step": state.step,
        "opt_t": state.opt["t"],
        "teacher_steps_since_sync": (
            state.teacher.steps_since_sync if state.teacher is not None else 0),
        "config": config_to_dict(state.cfg),
        "config_hash": config_hash(state.cfg),
    }
    save_checkpoint(path, _checkpoint_arrays(state), meta)


def load_state(path, dataset: data_mod.Dataset) -> TrainerState:
    arrays, header = load_checkpoint(path)
    cfg = config_from_dict(header["config"])
    state = init_state(cfg, dataset)
    for name, arr in arrays.items():
        group, _, key = name.partition("/")
        if group == "student":
            state.params[key] = arr.copy()
        elif group == "teacher":
            state.teacher.params[key] = arr.copy()
        elif group == "base":
            state.base_params[key] = arr.copy()
        elif group == "opt":
            sub, _, pkey = key.partition("/")
            state.opt[sub][pkey] = arr.copy()
    state.step = int(header["step"])
    state.opt["t"] = int(header["opt_t"])
    if state.teacher is not None:
        state.teacher.steps_since_sync = int(header.get("teacher_steps_since_sync", 0))
    return state


def train(cfg: TrainConfig, resume_from=None, log=print) -> dict:
    """Run the configured budget; returns paths and the final eval record."""
    dataset = data_mod.load_dataset(cfg.data_dir)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = load_state(resume_from, dataset)
        if config_hash(state.cfg) != config_hash(cfg):
            raise ConfigError("checkpoint config does not match the requested config")
        state.cfg = cfg
    else:
        state = init_state(cfg, dataset)

    n_train = len(dataset.train)
    if n_train < cfg.batch_size:
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds training set of {n_train}")
    steps_per_epoch = n_train // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    state.total_steps = total_steps

    header = {
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "format_version": 1,
        "total_steps": total_steps,
    }
    metrics_path = out_dir / "metrics.jsonl"
    timings_path = out_dir / "timings.jsonl"
    evals_path = out_dir / "evals.jsonl"
    mode = "a" if resume_from is not None else "w"
    encoded_cache = [data_mod.encode_example(ex, state.vocab) for ex in dataset.train]

    final_eval = None
    with open(metrics_path, mode) as mfh, open(timings_path, mode) as tfh, \
            open(evals_path, mode) as efh:
        mfh.write(json.dumps(header, sort_keys=True) + "\n")

        def emit_eval(final: bool):
            record = _run_eval(state, dataset, final)
            efh.write(json.dumps(record, sort_keys=True) + "\n")
            efh.flush()
            log(f"[eval] step {record['step']} entropy {record['eval_entropy']:.4f} "
                f"greedy_acc {record['greedy_accuracy']:.4f}"
                + (f" diversity {record['ngram_diversity']:.4f}" if final else ""))
            return record

        if state.step == 0 and total_steps > 0:
            emit_eval(final=False)

        while state.step < total_steps:
            epoch = state.step // steps_per_epoch
            index_in_epoch = state.step % steps_per_epoch
            order = _epoch_order(cfg.seed, epoch, n_train)
            lo = index_in_epoch * cfg.batch_size
            picks = order[lo:lo + cfg.batch_size]
            tokens, mask = data_mod.pad_batch([encoded_cache[i] for i in picks])
            record = train_step(state, tokens, mask, out_dir=out_dir)
            mfh.write(record.to_json() + "\n")
            tfh.write(json.dumps({"step": record.step, "wall_ms": round(record.wall_ms, 3)}) + "\n")
            if record.step % 50 == 0 or record.step == total_steps:
                log(f"[train] step {record.step}/{total_steps} "
                    f"loss {record.loss_total:.4f} entropy {record.mean_token_entropy:.4f} "
                    f"lr {record.learning_rate:.2e}")
            if cfg.eval_every and record.step % cfg.eval_every == 0 and record.step < total_steps:
                emit_eval(final=False)
            if cfg.checkpoint_every and record.step % cfg.checkpoint_every == 0 \
                    and record.step < total_steps:
                save_state(state, out_dir / f"ckpt_step{record.step}.bin")

        final_ckpt = out_dir / "ckpt_final.bin"
        save_state(state, final_ckpt)
        if total_steps > 0:
            final_eval = emit_eval(final=True)

    return {
        "out_dir": str(out_dir),
        "checkpoint": str(final_ckpt),
        "metrics": str(metrics_path),
        "evals": str(evals_path),
        "steps": state.step,
        "final_eval": final_eval,
    }
