"""Sketch-conditioned server network, implemented from scratch on numpy.

The network is  logits = head(encode(x), digest(sketch))  where:

  * encode embeds tokens and applies one dense+ReLU layer. Classification
    mean-pools embeddings; tagging concatenates a +-2 token window per
    position; next-token prediction concatenates the previous 5 embeddings.
  * digest maps the client sketch through a small MLP (or a single linear
    layer in the LM configuration) to a fixed-size vector g.
  * head combines the encoded instance with g. Six variants: a plain
    softmax head that ignores g (baseline), an additive per-label bias
    (concat), a nonlinear joint layer (deep), a digest-gated convex blend
    of two softmax matrices (decompose), and mixtures of expert heads gated
    on the digest (moe_g) or on the encoding (moe).

All gradients are hand-derived and exact; grad_check verifies them against
central finite differences. Everything runs in float64 and consumes no RNG
outside explicit train-mode dropout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

Params = dict[str, np.ndarray]

TASKS = ("classify", "tag", "lm")
COMBINERS = ("baseline", "concat", "deep", "decompose", "moe_g", "moe")

# Heads that output probabilities directly instead of logits.
_PROB_COMBINERS = ("moe_g", "moe")


class ModelError(ValueError):
    """Invalid model configuration or input."""


@dataclass(frozen=True)
class ModelConfig:
    task: str
    combiner: str
    vocab_size: int
    n_labels: int
    sketch_dim: int
    embed_dim: int = 32
    enc_hidden: int = 64
    digest_hidden: int = 256
    digest_dim: int = 128
    digest_linear: bool = False
    n_experts: int = 4
    deep_hidden: int = 128
    tag_window: int = 2
    lm_context: int = 5

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ModelError(f"unknown task: {self.task}")
        if self.combiner not in COMBINERS:
            raise ModelError(f"unknown combiner: {self.combiner}")
        if self.task == "lm" and self.n_labels != self.vocab_size:
            raise ModelError("lm task predicts over the vocabulary")

    @property
    def enc_in(self) -> int:
        if self.task == "classify":
            return self.embed_dim
        if self.task == "tag":
            return (2 * self.tag_window + 1) * self.embed_dim
        return self.lm_context * self.embed_dim


def lm_config(
    vocab_size: int,
    sketch_dim: int,
    combiner: str = "concat",
    embed_dim: int = 32,
    enc_hidden: int = 64,
    digest_dim: int = 32,
    n_experts: int = 4,
) -> ModelConfig:
    """LM configuration: narrow linear digest fanned out over the vocabulary."""
    return ModelConfig(
        task="lm",
        combiner=combiner,
        vocab_size=vocab_size,
        n_labels=vocab_size,
        sketch_dim=sketch_dim,
        embed_dim=embed_dim,
        enc_hidden=enc_hidden,
        digest_dim=digest_dim,
        digest_linear=True,
        n_experts=n_experts,
    )


def _tensor_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every learnable tensor, in a fixed order."""
    d = cfg.enc_hidden
    h = cfg.digest_dim
    ell = cfg.n_labels
    specs: list[tuple[str, tuple[int, ...], int]] = [
        ("emb", (cfg.vocab_size, cfg.embed_dim), cfg.embed_dim),
        ("enc_w", (d, cfg.enc_in), cfg.enc_in),
        ("enc_b", (d,), cfg.enc_in),
    ]
    if cfg.combiner != "baseline":
        if cfg.digest_linear:
            specs += [
                ("g_w1", (h, cfg.sketch_dim), cfg.sketch_dim),
                ("g_b1", (h,), cfg.sketch_dim),
            ]
        else:
            specs += [
                ("g_w1", (cfg.digest_hidden, cfg.sketch_dim), cfg.sketch_dim),
                ("g_b1", (cfg.digest_hidden,), cfg.sketch_dim),
                ("g_w2", (h, cfg.digest_hidden), cfg.digest_hidden),
                ("g_b2", (h,), cfg.digest_hidden),
            ]
    if cfg.combiner == "baseline":
        specs += [("head_wm", (ell, d), d), ("head_b", (ell,), d)]
    elif cfg.combiner == "concat":
        specs += [
            ("head_wm", (ell, d), d),
            ("head_wg", (ell, h), h),
            ("head_b", (ell,), d),
        ]
    elif cfg.combiner == "deep":
        specs += [
            ("deep_wh", (cfg.deep_hidden, d + h), d + h),
            ("deep_bh", (cfg.deep_hidden,), d + h),
            ("deep_wo", (ell, cfg.deep_hidden), cfg.deep_hidden),
            ("deep_bo", (ell,), cfg.deep_hidden),
        ]
    elif cfg.combiner == "decompose":
        specs += [
            ("dec_sm1", (ell, d), d),
            ("dec_sm2", (ell, d), d),
            ("dec_gu", (h,), h),
            ("dec_gb", (), h),
            ("dec_b", (ell,), d),
        ]
    elif cfg.combiner in ("moe_g", "moe"):
        gate_dim = h if cfg.combiner == "moe_g" else d
        if cfg.n_experts < 1:
            raise ModelError("n_experts must be >= 1")
        specs += [
            ("moe_gate", (cfg.n_experts, gate_dim), gate_dim),
            ("moe_w", (cfg.n_experts, ell, d), d),
            ("moe_b", (cfg.n_experts, ell), d),
        ]
    return specs


def init_params(cfg: ModelConfig, seed: int) -> Params:
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per tensor, drawn in spec
    order from one seeded generator."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape, fan_in in _tensor_specs(cfg):
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float64)
    return params


def zero_grads(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x: float) -> float:
    if x >= 0:
        a = 1.0 / (1.0 + math.exp(-x))
    else:
        e = math.exp(x)
        a = e / (1.0 + e)
    return min(max(a, 1e-12), 1.0 - 1e-12)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

def _window_matrix(emb_rows: np.ndarray, offsets: list[int]) -> np.ndarray:
    """Stack embedding rows at the given relative offsets per position,
    zero-padded at the boundaries. Returns (T, len(offsets)*E)."""
    t, e = emb_rows.shape
    lo = -min(0, min(offsets))
    hi = max(0, max(offsets))
    padded = np.zeros((t + lo + hi, e), dtype=emb_rows.dtype)
    padded[lo : lo + t] = emb_rows
    blocks = [padded[lo + off : lo + off + t] for off in offsets]
    return np.concatenate(blocks, axis=1)


def _scatter_window_grad(
    d_x: np.ndarray, ids: np.ndarray, offsets: list[int], d_emb: np.ndarray
) -> None:
    t = ids.shape[0]
    e = d_emb.shape[1]
    lo = -min(0, min(offsets))
    hi = max(0, max(offsets))
    d_padded = np.zeros((t + lo + hi, e), dtype=d_x.dtype)
    for k, off in enumerate(offsets):
        d_padded[lo + off : lo + off + t] += d_x[:, k * e : (k + 1) * e]
    np.add.at(d_emb, ids, d_padded[lo : lo + t])


def _encoder_offsets(cfg: ModelConfig) -> list[int]:
    if cfg.task == "tag":
        w = cfg.tag_window
        return list(range(-w, w + 1))
    return list(range(-cfg.lm_context, 0))


def encode(params: Params, cfg: ModelConfig, ids: np.ndarray):
    """Encode one instance. Returns (M, cache) where M is (T, enc_hidden):
    one row for classification, one row per token/position otherwise."""
    ids = np.asarray(ids, dtype=np.int64)
    if cfg.task == "classify":
        if ids.shape[0] == 0:
            raise ModelError("empty instance")
        x = params["emb"][ids].mean(axis=0, keepdims=True)  # (1, E)
    else:
        if ids.shape[0] == 0:
            raise ModelError("empty instance")
        x = _window_matrix(params["emb"][ids], _encoder_offsets(cfg))
    z = x @ params["enc_w"].T + params["enc_b"]
    m = _relu(z)
    return m, {"ids": ids, "x": x, "z": z}


def encode_backward(
    params: Params, cfg: ModelConfig, cache: dict, d_m: np.ndarray, grads: Params
) -> None:
    delta = d_m * (cache["z"] > 0)
    grads["enc_w"] += delta.T @ cache["x"]
    grads["enc_b"] += delta.sum(axis=0)
    d_x = delta @ params["enc_w"]
    ids = cache["ids"]
    if cfg.task == "classify":
        np.add.at(grads["emb"], ids, np.repeat(d_x / ids.shape[0], ids.shape[0], axis=0))
    else:
        _scatter_window_grad(d_x, ids, _encoder_offsets(cfg), grads["emb"])


# ---------------------------------------------------------------------------
# Digest network
# ---------------------------------------------------------------------------

def digest(
    params: Params,
    cfg: ModelConfig,
    sketch_values: np.ndarray,
    *,
    train_mode: bool = False,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
):
    """Map a sketch to the digest vector g. Inverted dropout on the sketch
    in train mode only. Returns (g, cache)."""
    s = np.asarray(sketch_values, dtype=np.float64)
    if s.shape != (cfg.sketch_dim,):
        raise ModelError(
            f"sketch dim {s.shape} does not match model sketch_dim {cfg.sketch_dim}"
        )
    if train_mode and dropout_p > 0.0:
        if dropout_p >= 1.0:
            s = np.zeros_like(s)
        else:
            if rng is None:
                raise ModelError("dropout requires an rng")
            mask = (rng.random(s.shape) >= dropout_p).astype(np.float64)
            s = s * mask / (1.0 - dropout_p)
    if cfg.digest_linear:
        g = params["g_w1"] @ s + params["g_b1"]
        return g, {"s": s, "linear": True}
    z1 = params["g_w1"] @ s + params["g_b1"]
    a1 = _relu(z1)
    g = params["g_w2"] @ a1 + params["g_b2"]
    return g, {"s": s, "z1": z1, "a1": a1, "linear": False}


def digest_backward(params: Params, cache: dict, d_g: np.ndarray, grads: Params) -> None:
    if cache["linear"]:
        grads["g_w1"] += np.outer(d_g, cache["s"])
        grads["g_b1"] += d_g
        return
    grads["g_w2"] += np.outer(d_g, cache["a1"])
    grads["g_b2"] += d_g
    d_a1 = params["g_w2"].T @ d_g
    delta1 = d_a1 * (cache["z1"] > 0)
    grads["g_w1"] += np.outer(delta1, cache["s"])
    grads["g_b1"] += delta1

# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

def _head_logits(params: Params, cfg: ModelConfig, m_rows: np.ndarray, g):
    """Logits (T, L) for the logit-producing combiners, plus a cache."""
    c = cfg.combiner
    if c == "baseline":
        logits = m_rows @ params["head_wm"].T + params["head_b"]
        return logits, {}
    if c == "concat":
        logits = m_rows @ params["head_wm"].T + params["head_wg"] @ g + params["head_b"]
        return logits, {}
    if c == "deep":
        h_in = np.concatenate(
            [m_rows, np.broadcast_to(g, (m_rows.shape[0], g.shape[0]))], axis=1
        )
        z_h = h_in @ params["deep_wh"].T + params["deep_bh"]
        h = _relu(z_h)
        logits = h @ params["deep_wo"].T + params["deep_bo"]
        return logits, {"h_in": h_in, "z_h": z_h, "h": h}
    if c == "decompose":
        pre = float(params["dec_gu"] @ g + params["dec_gb"])
        alpha = _sigmoid(pre)
        mix = alpha * params["dec_sm1"] + (1.0 - alpha) * params["dec_sm2"]
        logits = m_rows @ mix.T + params["dec_b"]
        return logits, {"alpha": alpha, "mix": mix}
    raise ModelError(f"{c} does not produce logits")


def _head_logits_backward(
    params: Params,
    cfg: ModelConfig,
    cache: dict,
    m_rows: np.ndarray,
    g,
    d_logits: np.ndarray,
    grads: Params,
):
    """Backprop through a logit head; returns (dM, dg)."""
    c = cfg.combiner
    if c == "baseline":
        grads["head_wm"] += d_logits.T @ m_rows
        grads["head_b"] += d_logits.sum(axis=0)
        return d_logits @ params["head_wm"], None
    if c == "concat":
        grads["head_wm"] += d_logits.T @ m_rows
        grads["head_b"] += d_logits.sum(axis=0)
        d_sum = d_logits.sum(axis=0)
        grads["head_wg"] += np.outer(d_sum, g)
        return d_logits @ params["head_wm"], params["head_wg"].T @ d_sum
    if c == "deep":
        d = cfg.enc_hidden
        grads["deep_wo"] += d_logits.T @ cache["h"]
        grads["deep_bo"] += d_logits.sum(axis=0)
        d_h = d_logits @ params["deep_wo"]
        delta = d_h * (cache["z_h"] > 0)
        grads["deep_wh"] += delta.T @ cache["h_in"]
        grads["deep_bh"] += delta.sum(axis=0)
        d_in = delta @ params["deep_wh"]
        return d_in[:, :d], d_in[:, d:].sum(axis=0)
    if c == "decompose":
        alpha = cache["alpha"]
        d_mix = d_logits.T @ m_rows
        grads["dec_sm1"] += alpha * d_mix
        grads["dec_sm2"] += (1.0 - alpha) * d_mix
        d_alpha = float(np.sum(d_mix * (params["dec_sm1"] - params["dec_sm2"])))
        d_pre = d_alpha * alpha * (1.0 - alpha)
        grads["dec_gu"] += d_pre * g
        grads["dec_gb"] += d_pre
        grads["dec_b"] += d_logits.sum(axis=0)
        return d_logits @ cache["mix"], d_pre * params["dec_gu"]
    raise ModelError(f"{c} does not produce logits")


def _moe_forward(params: Params, cfg: ModelConfig, m_rows: np.ndarray, g):
    """Mixture probabilities (T, L) with cache. Gate input is the digest for
    moe_g and the encoded instance for moe."""
    t = m_rows.shape[0]
    z = np.einsum("td,kld->ktl", m_rows, params["moe_w"]) + params["moe_b"][:, None, :]
    q = _softmax_rows(z)
    if cfg.combiner == "moe_g":
        gate_logits = params["moe_gate"] @ g  # (K,)
        alpha = _softmax_rows(gate_logits[None, :])[0]  # (K,)
        p = np.einsum("k,ktl->tl", alpha, q)
    else:
        gate_logits = m_rows @ params["moe_gate"].T  # (T, K)
        alpha = _softmax_rows(gate_logits)
        p = np.einsum("tk,ktl->tl", alpha, q)
    return p, {"q": q, "alpha": alpha}


def _moe_backward(
    params: Params,
    cfg: ModelConfig,
    cache: dict,
    m_rows: np.ndarray,
    g,
    labels: np.ndarray,
    weights: np.ndarray,
    p: np.ndarray,
    grads: Params,
):
    """Backprop of sum_t weights[t] * (-log p[t, labels[t]])."""
    q, alpha = cache["q"], cache["alpha"]
    t_idx = np.arange(m_rows.shape[0])
    p_y = np.maximum(p[t_idx, labels], 1e-300)
    coef = -weights / p_y  # (T,) dL/dp_y
    q_y = q[:, t_idx, labels]  # (K, T)
    if cfg.combiner == "moe_g":
        a_kt = alpha[:, None]  # (K, 1) broadcast over tokens
    else:
        a_kt = alpha.T  # (K, T)
    u = coef[None, :] * a_kt  # upstream on q at the label index
    dot = u * q_y
    d_z = -dot[:, :, None] * q
    d_z[:, t_idx, labels] += u * q_y
    grads["moe_w"] += np.einsum("ktl,td->kld", d_z, m_rows)
    grads["moe_b"] += d_z.sum(axis=1)
    d_m = np.einsum("ktl,kld->td", d_z, params["moe_w"])
    d_alpha_kt = coef[None, :] * q_y  # (K, T)
    if cfg.combiner == "moe_g":
        d_alpha = d_alpha_kt.sum(axis=1)  # (K,)
        d_gate = alpha * (d_alpha - float(d_alpha @ alpha))
        grads["moe_gate"] += np.outer(d_gate, g)
        return d_m, params["moe_gate"].T @ d_gate
    d_alpha = d_alpha_kt.T  # (T, K)
    d_gate = alpha * (d_alpha - np.sum(d_alpha * alpha, axis=1, keepdims=True))
    grads["moe_gate"] += d_gate.T @ m_rows
    d_m += d_gate @ params["moe_gate"]
    return d_m, None


def head_scores(params: Params, cfg: ModelConfig, m_rows: np.ndarray, g) -> np.ndarray:
    """Per-row probability distributions over labels, (T, L)."""
    if cfg.combiner in _PROB_COMBINERS:
        p, _ = _moe_forward(params, cfg, m_rows, g)
        return p
    logits, _ = _head_logits(params, cfg, m_rows, g)
    return _softmax_rows(logits)


def head_loss(
    params: Params,
    cfg: ModelConfig,
    m_rows: np.ndarray,
    g,
    labels: np.ndarray,
    weights: np.ndarray,
):
    """Weighted cross-entropy over the rows of m_rows. Returns (loss, cache)."""
    t_idx = np.arange(m_rows.shape[0])
    if cfg.combiner in _PROB_COMBINERS:
        p, cache = _moe_forward(params, cfg, m_rows, g)
        p_y = np.maximum(p[t_idx, labels], 1e-300)
        loss = float(np.sum(weights * -np.log(p_y)))
        cache["p"] = p
        return loss, cache
    logits, cache = _head_logits(params, cfg, m_rows, g)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    loss = float(np.sum(weights * (lse - shifted[t_idx, labels])))
    cache["probs"] = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    return loss, cache


def head_loss_backward(
    params: Params,
    cfg: ModelConfig,
    cache: dict,
    m_rows: np.ndarray,
    g,
    labels: np.ndarray,
    weights: np.ndarray,
    grads: Params,
):
    """Returns (dM, dg); dg is None when the head never reads the digest."""
    t_idx = np.arange(m_rows.shape[0])
    if cfg.combiner in _PROB_COMBINERS:
        return _moe_backward(
            params, cfg, cache, m_rows, g, labels, weights, cache["p"], grads
        )
    d_logits = cache["probs"].copy()
    d_logits[t_idx, labels] -= 1.0
    d_logits *= weights[:, None]
    return _head_logits_backward(params, cfg, cache, m_rows, g, d_logits, grads)


# ---------------------------------------------------------------------------
# Spec-level single-vector combiner API
# ---------------------------------------------------------------------------

def combine_concat(params: Params, cfg: ModelConfig, m: np.ndarray, g: np.ndarray):
    """Additive per-label bias head: W_m m + W_g g + b."""
    logits, _ = _head_logits(params, cfg, m[None, :], g)
    return logits[0]


def combine_deep(params: Params, cfg: ModelConfig, m: np.ndarray, g: np.ndarray):
    logits, _ = _head_logits(params, cfg, m[None, :], g)
    return logits[0]


def combine_decompose(params: Params, cfg: ModelConfig, m: np.ndarray, g: np.ndarray):
    logits, _ = _head_logits(params, cfg, m[None, :], g)
    return logits[0]


def decompose_alpha(params: Params, g: np.ndarray) -> float:
    """The gate weight blending the two softmax matrices; strictly in (0,1)."""
    return _sigmoid(float(params["dec_gu"] @ g + params["dec_gb"]))


def combine_moe(params: Params, cfg: ModelConfig, m: np.ndarray, g) -> np.ndarray:
    """Mixture-of-experts head; returns probabilities, not logits."""
    p, _ = _moe_forward(params, cfg, m[None, :], g)
    return p[0]


def moe_mixture_weights(params: Params, cfg: ModelConfig, m: np.ndarray, g) -> np.ndarray:
    _, cache = _moe_forward(params, cfg, m[None, :], g)
    alpha = cache["alpha"]
    return alpha if cfg.combiner == "moe_g" else alpha[0]


def lm_bias_head(params: Params, cfg: ModelConfig, m: np.ndarray, g: np.ndarray):
    """Next-token logits with the per-client additive vocabulary bias."""
    if cfg.task != "lm":
        raise ModelError("lm_bias_head requires an lm-task model")
    return combine_concat(params, cfg, m, g)


def loss_xent(values: np.ndarray, label: int, kind: str = "logits") -> float:
    """Cross-entropy of one distribution, stabilized by max-subtraction."""
    values = np.asarray(values, dtype=np.float64)
    if label < 0 or label >= values.shape[0]:
        raise ModelError(f"label {label} out of range for {values.shape[0]} classes")
    if kind == "probs":
        return float(-np.log(max(float(values[label]), 1e-300)))
    shifted = values - values.max()
    return float(np.log(np.sum(np.exp(shifted))) - shifted[label])


# ---------------------------------------------------------------------------
# Batch forward/backward
# ---------------------------------------------------------------------------

def instance_targets(cfg: ModelConfig, ids: np.ndarray, labels) -> np.ndarray:
    """Targets aligned with the rows produced by encode()."""
    if cfg.task == "classify":
        return np.array([labels], dtype=np.int64)
    if cfg.task == "tag":
        return np.asarray(labels, dtype=np.int64)
    return np.asarray(ids, dtype=np.int64)


def batch_loss_and_grads(
    params: Params,
    cfg: ModelConfig,
    items: list[tuple[str, np.ndarray, object]],
    sketches: dict[str, np.ndarray] | None,
    *,
    train_mode: bool = False,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
):
    """Mean loss over a batch of (client, ids, labels) items and exact
    gradients for every parameter tensor.

    The batch loss is the mean over items of the per-item mean token loss.
    Sketch dropout draws one mask per client per batch, in sorted client
    order, so RNG consumption is independent of item order."""
    if not items:
        raise ModelError("empty batch")
    grads = zero_grads(params)
    batch_size = len(items)
    use_digest = cfg.combiner != "baseline"
    digests: dict[str, tuple[np.ndarray, dict]] = {}
    if use_digest:
        if sketches is None:
            raise ModelError("combiner requires client sketches")
        for client in sorted({client for client, _, _ in items}):
            digests[client] = digest(
                params,
                cfg,
                sketches[client],
                train_mode=train_mode,
                dropout_p=dropout_p,
                rng=rng,
            )
    d_g_sums: dict[str, np.ndarray] = {}
    total_loss = 0.0
    for client, ids, labels in items:
        m_rows, enc_cache = encode(params, cfg, ids)
        targets = instance_targets(cfg, ids, labels)
        if targets.shape[0] != m_rows.shape[0]:
            raise ModelError("labels misaligned with encoded positions")
        weights = np.full(targets.shape[0], 1.0 / (batch_size * targets.shape[0]))
        g = digests[client][0] if use_digest else None
        loss, cache = head_loss(params, cfg, m_rows, g, targets, weights)
        total_loss += loss
        d_m, d_g = head_loss_backward(
            params, cfg, cache, m_rows, g, targets, weights, grads
        )
        encode_backward(params, cfg, enc_cache, d_m, grads)
        if d_g is not None:
            if client in d_g_sums:
                d_g_sums[client] += d_g
            else:
                d_g_sums[client] = d_g.copy()
    for client, d_g in sorted(d_g_sums.items()):
        digest_backward(params, digests[client][1], d_g, grads)
    return total_loss, grads


def batch_loss(
    params: Params,
    cfg: ModelConfig,
    items: list[tuple[str, np.ndarray, object]],
    sketches: dict[str, np.ndarray] | None,
) -> float:
    """Eval-mode batch loss (no dropout, no gradient work)."""
    if not items:
        raise ModelError("empty batch")
    use_digest = cfg.combiner != "baseline"
    digests = {}
    if use_digest:
        for client in sorted({client for client, _, _ in items}):
            digests[client] = digest(params, cfg, sketches[client])[0]
    total = 0.0
    for client, ids, labels in items:
        m_rows, _ = encode(params, cfg, ids)
        targets = instance_targets(cfg, ids, labels)
        weights = np.full(targets.shape[0], 1.0 / (len(items) * targets.shape[0]))
        g = digests[client] if use_digest else None
        loss, _ = head_loss(params, cfg, m_rows, g, targets, weights)
        total += loss
    return total


def instance_scores(
    params: Params, cfg: ModelConfig, ids: np.ndarray, g: np.ndarray | None
) -> np.ndarray:
    """Eval-mode per-position label distributions for one instance."""
    m_rows, _ = encode(params, cfg, ids)
    return head_scores(params, cfg, m_rows, g)


def zero_digest(cfg: ModelConfig) -> np.ndarray:
    return np.zeros(cfg.digest_dim, dtype=np.float64)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def grad_check(
    params: Params,
    cfg: ModelConfig,
    items: list[tuple[str, np.ndarray, object]],
    sketches: dict[str, np.ndarray] | None,
    eps: float = 1e-5,
    max_per_tensor: int = 50,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences over an evenly spaced slice of every tensor."""
    if not (0.0 < eps <= 1e-2):
        raise ModelError("invalid epsilon")
    _, analytic = batch_loss_and_grads(params, cfg, items, sketches)
    worst = 0.0
    for name in sorted(params):
        tensor = params[name]
        flat = tensor.reshape(-1)
        n = flat.shape[0]
        k = min(max_per_tensor, n)
        idxs = np.unique(np.round(np.linspace(0, n - 1, k)).astype(int))
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            up = batch_loss(params, cfg, items, sketches)
            flat[i] = orig - eps
            down = batch_loss(params, cfg, items, sketches)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
