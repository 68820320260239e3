"""A miniature decoder-only language model in plain NumPy (float64).

Pre-norm transformer with learned positional embeddings and hand-derived
backward passes: forward produces per-position logits, backward turns an
upstream gradient on the logits into exact gradients for every parameter.
No dropout, no KV cache, no GPU. The finite-difference gradient gate in the
test suite is the standing contract for any change here.

Parameters live in a flat dict of float64 arrays:

    wte (V,d)  wpe (ctx,d)
    per layer i:  li.ln1.g/.b  li.wq/.wk/.wv/.wo (d,d)
                  li.ln2.g/.b  li.wf (d,4d)  li.wp (4d,d)
    lnf.g/.b (d,)  head (d,V) unless embeddings are tied
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LN_EPS = 1e-5
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


@dataclass
class ModelConfig:
    vocab_size: int
    context_len: int = 128
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    seed: int = 0
    head_init: str = "zero"      # "zero" keeps the initial distribution uniform
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.head_init not in ("zero", "normal"):
            raise ValueError(f"head_init must be 'zero' or 'normal', got {self.head_init!r}")
        # Desk-scale caps: this model is meant to train in minutes on a CPU.
        caps = dict(vocab_size=512, context_len=256, d_model=128, n_layers=4)
        for name, cap in caps.items():
            if getattr(self, name) > cap:
                raise ValueError(f"{name}={getattr(self, name)} exceeds desk-scale cap {cap}")
        for name in ("context_len", "d_model", "n_layers", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def init_params(cfg: ModelConfig) -> dict:
    """Seeded init: normal(0, 0.02), residual-out projections scaled by
    1/sqrt(2*n_layers), layer norms at identity, output head zeroed by
    default so the initial next-token distribution is exactly uniform."""
    rng = np.random.default_rng(cfg.seed)
    std = 0.02
    out_scale = 1.0 / np.sqrt(2.0 * cfg.n_layers)
    d, v = cfg.d_model, cfg.vocab_size

    def normal(*shape, scale=1.0):
        return rng.normal(0.0, std * scale, size=shape)

    params = {
        "wte": normal(v, d),
        "wpe": normal(cfg.context_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"l{i}."
        params[p + "ln1.g"] = np.ones(d)
        params[p + "ln1.b"] = np.zeros(d)
        params[p + "wq"] = normal(d, d)
        params[p + "wk"] = normal(d, d)
        params[p + "wv"] = normal(d, d)
        params[p + "wo"] = normal(d, d, scale=out_scale)
        params[p + "ln2.g"] = np.ones(d)
        params[p + "ln2.b"] = np.zeros(d)
        params[p + "wf"] = normal(d, 4 * d)
        params[p + "wp"] = normal(4 * d, d, scale=out_scale)
    params["lnf.g"] = np.ones(d)
    params["lnf.b"] = np.zeros(d)
    if not cfg.tie_embeddings:
        params["head"] = np.zeros((d, v)) if cfg.head_init == "zero" else normal(d, v)
    return params


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count implied by the config."""
    d, v = cfg.d_model, cfg.vocab_size
    per_layer = 12 * d * d + 4 * d
    total = v * d + cfg.context_len * d + cfg.n_layers * per_layer + 2 * d
    if not cfg.tie_embeddings:
        total += d * v
    return total


def _check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    t = np.asarray(tokens)
    if t.ndim != 2:
        raise ValueError(f"tokens must be (batch, time), got shape {t.shape}")
    t = t.astype(np.int64)
    if t.shape[1] > cfg.context_len:
        raise ValueError(f"sequence length {t.shape[1]} exceeds context_len {cfg.context_len}")
    if t.size and (t.min() < 0 or t.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range for vocab {cfg.vocab_size}")
    return t


def _layernorm_f(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_b(dy, g, ln_cache):
    xhat, rstd = ln_cache
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu_f(x):
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def _gelu_b(dy, x, t):
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def forward_with_cache(params: dict, tokens, cfg: ModelConfig):
    """Causal forward pass; returns (logits (B,T,V), cache for backward)."""
    t_ids = _check_tokens(tokens, cfg)
    batch, time = t_ids.shape
    n_heads = cfg.n_heads
    d_head = cfg.d_model // n_heads
    scale = 1.0 / np.sqrt(d_head)
    causal = np.tril(np.ones((time, time), dtype=bool))

    x = params["wte"][t_ids] + params["wpe"][:time][None, :, :]
    cache = {"tokens": t_ids, "layers": []}
    for i in range(cfg.n_layers):
        p = f"l{i}."
        lc = {"x_in": x}
        h1, lc["ln1"] = _layernorm_f(x, params[p + "ln1.g"], params[p + "ln1.b"])
        lc["h1"] = h1
        flat = h1.reshape(batch * time, -1)
        q = (flat @ params[p + "wq"]).reshape(batch, time, n_heads, d_head)
        k = (flat @ params[p + "wk"]).reshape(batch, time, n_heads, d_head)
        v = (flat @ params[p + "wv"]).reshape(batch, time, n_heads, d_head)
        scores = np.einsum("bthd,bshd->bhts", q, k) * scale
        scores = np.where(causal[None, None, :, :], scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(axis=-1, keepdims=True)
        ctx = np.einsum("bhts,bshd->bthd", att, v).reshape(batch, time, -1)
        lc.update(q=q, k=k, v=v, att=att, ctx=ctx)
        x = x + (ctx.reshape(batch * time, -1) @ params[p + "wo"]).reshape(batch, time, -1)

        lc["x_mid"] = x
        h2, lc["ln2"] = _layernorm_f(x, params[p + "ln2.g"], params[p + "ln2.b"])
        lc["h2"] = h2
        pre = h2.reshape(batch * time, -1) @ params[p + "wf"]
        act, tanh_u = _gelu_f(pre)
        lc.update(pre=pre, act=act, tanh_u=tanh_u)
        x = x + (act @ params[p + "wp"]).reshape(batch, time, -1)
        cache["layers"].append(lc)

    xf, cache["lnf"] = _layernorm_f(x, params["lnf.g"], params["lnf.b"])
    cache["x_last"] = x
    cache["xf"] = xf
    w_head = params["wte"].T if cfg.tie_embeddings else params["head"]
    logits = (xf.reshape(batch * time, -1) @ w_head).reshape(batch, time, -1)
    return logits, cache


def forward(params: dict, tokens, cfg: ModelConfig) -> np.ndarray:
    """Per-position logits; position t depends only on tokens <= t."""
    logits, _ = forward_with_cache(params, tokens, cfg)
    return logits


def backward_from_cache(params: dict, cache, upstream, cfg: ModelConfig) -> dict:
    """Exact reverse-mode gradients for every parameter given d(loss)/d(logits)."""
    up = np.asarray(upstream, dtype=np.float64)
    t_ids = cache["tokens"]
    batch, time = t_ids.shape
    if up.shape != (batch, time, cfg.vocab_size):
        raise ValueError(f"upstream grad shape {up.shape} does not match logits "
                         f"{(batch, time, cfg.vocab_size)}")
    if not np.all(np.isfinite(up)):
        raise ValueError("upstream gradient contains non-finite values")
    n_heads = cfg.n_heads
    d_head = cfg.d_model // n_heads
    scale = 1.0 / np.sqrt(d_head)

    grads = {}
    up_flat = up.reshape(batch * time, -1)
    xf_flat = cache["xf"].reshape(batch * time, -1)
    w_head = params["wte"].T if cfg.tie_embeddings else params["head"]
    head_grad = xf_flat.T @ up_flat
    if cfg.tie_embeddings:
        grads["wte"] = head_grad.T
    else:
        grads["head"] = head_grad
        grads["wte"] = np.zeros_like(params["wte"])
    dxf = (up_flat @ w_head.T).reshape(batch, time, -1)
    dx, grads["lnf.g"], grads["lnf.b"] = _layernorm_b(dxf, params["lnf.g"], cache["lnf"])

    for i in reversed(range(cfg.n_layers)):
        p = f"l{i}."
        lc = cache["layers"][i]

        # MLP branch: x_out = x_mid + gelu(ln2(x_mid) @ wf) @ wp
        dact = dx.reshape(batch * time, -1) @ params[p + "wp"].T
        grads[p + "wp"] = lc["act"].T @ dx.reshape(batch * time, -1)
        dpre = _gelu_b(dact, lc["pre"], lc["tanh_u"])
        grads[p + "wf"] = lc["h2"].reshape(batch * time, -1).T @ dpre
        dh2 = (dpre @ params[p + "wf"].T).reshape(batch, time, -1)
        dmid, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layernorm_b(
            dh2, params[p + "ln2.g"], lc["ln2"])
        dx = dx + dmid

        # Attention branch: x_mid = x_in + attn(ln1(x_in)) @ wo
        dctx = (dx.reshape(batch * time, -1) @ params[p + "wo"].T)
        grads[p + "wo"] = lc["ctx"].reshape(batch * time, -1).T @ dx.reshape(batch * time, -1)
        dctx = dctx.reshape(batch, time, n_heads, d_head)
        att, q, k, v = lc["att"], lc["q"], lc["k"], lc["v"]
        datt = np.einsum("bthd,bshd->bhts", dctx, v)
        dv = np.einsum("bhts,bthd->bshd", att, dctx)
        dscores = att * (datt - (att * datt).sum(axis=-1, keepdims=True))
        dq = np.einsum("bhts,bshd->bthd", dscores, k) * scale
        dk = np.einsum("bhts,bthd->bshd", dscores, q) * scale
        h1_flat = lc["h1"].reshape(batch * time, -1)
        dq_flat = dq.reshape(batch * time, -1)
        dk_flat = dk.reshape(batch * time, -1)
        dv_flat = dv.reshape(batch * time, -1)
        grads[p + "wq"] = h1_flat.T @ dq_flat
        grads[p + "wk"] = h1_flat.T @ dk_flat
        grads[p + "wv"] = h1_flat.T @ dv_flat
        dh1 = (
            dq_flat @ params[p + "wq"].T
            + dk_flat @ params[p + "wk"].T
            + dv_flat @ params[p + "wv"].T
        ).reshape(batch, time, -1)
        din, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layernorm_b(
            dh1, params[p + "ln1.g"], lc["ln1"])
        dx = dx + din

    np.add.at(grads["wte"], t_ids.reshape(-1), dx.reshape(batch * time, -1))
    grads["wpe"] = np.zeros_like(params["wpe"])
    grads["wpe"][:time] = dx.sum(axis=0)
    return grads


def backward(params: dict, tokens, upstream, cfg: ModelConfig) -> dict:
    """Recompute the forward pass, then backprop the upstream logit grads."""
    _, cache = forward_with_cache(params, tokens, cfg)
    return backward_from_cache(params, cache, upstream, cfg)


def greedy_decode(params: dict, cfg: ModelConfig, prompt_ids, max_new: int,
                  end_token: int | None = None) -> list[int]:
    """Append argmax tokens until max_new tokens, the end token, or the
    context limit."""
    seq = [int(t) for t in prompt_ids]
    if len(seq) > cfg.context_len:
        raise ValueError(f"prompt of {len(seq)} tokens exceeds context_len {cfg.context_len}")
    for _ in range(max_new):
        if len(seq) >= cfg.context_len:
            break
        logits = forward(params, np.array([seq]), cfg)[0, -1]
        nxt = int(np.argmax(logits))
        seq.append(nxt)
        if end_token is not None and nxt == end_token:
            break
    return seq


def _nucleus_pick(logits: np.ndarray, tau: float, top_p: float, rng) -> int:
    z = logits / tau
    z = z - z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    sorted_p = probs[order]
    prev_mass = np.cumsum(sorted_p) - sorted_p
    keep = prev_mass < top_p  # always keeps the top token
    kept = sorted_p[keep]
    kept /= kept.sum()
    cum = np.cumsum(kept)
    j = min(int(np.searchsorted(cum, rng.random(), side="right")), kept.shape[0] - 1)
    return int(order[np.flatnonzero(keep)[j]])


def sample_decode(params: dict, cfg: ModelConfig, prompt_ids, max_new: int,
                  tau: float, top_p: float, seed: int,
                  end_token: int | None = None) -> list[int]:
    """Nucleus sampling at temperature tau; reproducible given the seed."""
    if not (np.isfinite(tau) and tau > 0):
        raise ValueError(f"tau must be > 0, got {tau}")
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must be in (0, 1], got {top_p}")
    seq = [int(t) for t in prompt_ids]
    if len(seq) > cfg.context_len:
        raise ValueError(f"prompt of {len(seq)} tokens exceeds context_len {cfg.context_len}")
    rng = np.random.default_rng(seed)
    for _ in range(max_new):
        if len(seq) >= cfg.context_len:
            break
        logits = forward(params, np.array([seq]), cfg)[0, -1]
        nxt = _nucleus_pick(logits, tau, top_p, rng)
        seq.append(nxt)
        if end_token is not None and nxt == end_token:
            break
    return seq
