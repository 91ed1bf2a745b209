"""Shared neural machinery for both language models.

Everything is plain numpy with hand-written backward passes: embeddings,
per-segment sinusoidal positions, masked multi-head self-attention, LayerNorm
and its stage-conditioned AdaLN variant, position-wise feed-forward blocks,
cross-entropy, AdamW with linear warmup/decay, nucleus sampling, and a
central-finite-difference gradient checker used to validate the backward
passes.

Parameters live in a flat dict of name -> float64 ndarray. Weight sharing is
by construction: shared tensors are stored once and referenced by the code
paths that use them (e.g. the AR output projection IS the acoustic embedding
table), so tying cannot drift.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import formats, frontend
from .errors import OptimizerError, ValidationError

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    layers: int = 4
    heads: int = 4
    embed_dim: int = 128
    ffn_dim: int = 512
    dropout: float = 0.1
    phoneme_vocab: int = frontend.VOCAB_SIZE  # ids 0..V_p-1; phoneme-EOS = V_p
    codebook_size: int = 256  # acoustic ids 0..K-1; acoustic-EOS = K (AR only)
    quantizers: int = 8
    max_len: int = 4096

    def validate(self):
        if self.embed_dim % self.heads != 0:
            raise ValidationError("embed_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if min(self.layers, self.heads, self.embed_dim, self.ffn_dim) < 1:
            raise ValidationError("layers/heads/embed_dim/ffn_dim must be positive")
        if self.quantizers < 1 or self.codebook_size < 1:
            raise ValidationError("quantizers and codebook_size must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def phoneme_eos(self) -> int:
        return self.phoneme_vocab

    @property
    def acoustic_eos(self) -> int:
        return self.codebook_size


# -- positions -------------------------------------------------------------------

def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoid table: entry (p, 2k) = sin(p / 10000^(2k/dim)),
    entry (p, 2k+1) = cos of the same angle."""
    if dim % 2 != 0:
        raise ValidationError("position encoding dim must be even")
    if length < 0:
        raise ValidationError("length must be nonnegative")
    pos = np.arange(length, dtype=np.float64)[:, None]
    k2 = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, k2 / dim)
    out = np.empty((length, dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


@dataclass(frozen=True)
class SegmentedSequence:
    """Token ids with segment labels; positions restart at 0 per segment."""

    ids: np.ndarray
    segment_ids: np.ndarray
    positions: np.ndarray

    @classmethod
    def from_segments(cls, segments):
        segments = [np.asarray(s, dtype=np.int64) for s in segments]
        ids = np.concatenate(segments) if segments else np.empty(0, dtype=np.int64)
        seg_ids = np.concatenate(
            [np.full(len(s), i, dtype=np.int64) for i, s in enumerate(segments)]
        ) if segments else np.empty(0, dtype=np.int64)
        pos = np.concatenate(
            [np.arange(len(s), dtype=np.int64) for s in segments]
        ) if segments else np.empty(0, dtype=np.int64)
        return cls(ids=ids, segment_ids=seg_ids, positions=pos)


def segment_position_encoding(segment_lengths, dim: int) -> np.ndarray:
    """Sinusoid encodings restarting at position 0 for each segment."""
    blocks = [sinusoidal_positions(n, dim) for n in segment_lengths]
    if not blocks:
        return np.empty((0, dim), dtype=np.float64)
    return np.concatenate(blocks, axis=0)


# -- masks -----------------------------------------------------------------------

def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def full_mask(n: int) -> np.ndarray:
    return np.ones((n, n), dtype=bool)


# -- attention --------------------------------------------------------------------

def _attention_forward(q, k, v, mask):
    """Masked scaled dot-product attention. q/k/v: (..., T, hd); mask: (Tq, Tk)
    with True = may attend. Returns (context, probabilities)."""
    if not mask.any(axis=-1).all():
        raise ValidationError("attention mask has a fully masked row")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    scores = np.where(mask, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs @ v, probs


def attention(q, k, v, mask) -> np.ndarray:
    """Public single-shot attention: softmax(q k^T / sqrt(head_dim)) v."""
    out, _ = _attention_forward(
        np.asarray(q, dtype=np.float64),
        np.asarray(k, dtype=np.float64),
        np.asarray(v, dtype=np.float64),
        np.asarray(mask, dtype=bool),
    )
    return out


def _attention_backward(dctx, q, k, v, probs):
    """Backward of _attention_forward (mask handled implicitly: masked
    probabilities are exactly zero)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    dprobs = dctx @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(probs, -1, -2) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores *= scale
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    return dq, dk, dv


# -- layer norm / AdaLN -------------------------------------------------------------

def _ln_core_forward(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat, inv


def _ln_core_backward(dxhat, xhat, inv):
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def layer_norm(x, gain, bias):
    xhat, _ = _ln_core_forward(np.asarray(x, dtype=np.float64))
    return gain * xhat + bias


def adaln_modulation(stage_vec, pa, ba, pb, bb):
    """Scale/shift vectors from a linear projection of the stage embedding."""
    return stage_vec @ pa + ba, stage_vec @ pb + bb


def ada_layer_norm(h, stage: int, params, site: str = "ln_f") -> np.ndarray:
    """AdaLN(h, stage) = a_stage * LayerNorm(h) + b_stage for stage in [2, Q].

    `site` selects which projection bank to use (each norm site has its own).
    """
    n_stages = params["stage_emb"].shape[0]
    if not 2 <= stage <= n_stages + 1:
        raise ValidationError(f"stage must lie in [2, {n_stages + 1}], got {stage}")
    s = params["stage_emb"][stage - 2]
    a, b = adaln_modulation(
        s,
        params[f"{site}.pa"],
        params[f"{site}.ba"],
        params[f"{site}.pb"],
        params[f"{site}.bb"],
    )
    xhat, _ = _ln_core_forward(np.asarray(h, dtype=np.float64))
    return a * xhat + b


# -- parameter initialization --------------------------------------------------------

EMB_INIT_STD = 0.1
W_INIT_STD = 0.02


def init_stack_params(cfg: ModelConfig, rng: np.random.Generator, adaln: bool) -> dict:
    """Transformer trunk parameters (no embeddings). Residual-branch output
    projections are scaled down by sqrt(2 * layers)."""
    d, f = cfg.embed_dim, cfg.ffn_dim
    out_std = W_INIT_STD / math.sqrt(2.0 * cfg.layers)
    params = {}

    def norm_site(name):
        if adaln:
            params[f"{name}.pa"] = W_INIT_STD * rng.standard_normal((d, d))
            params[f"{name}.ba"] = np.ones(d)
            params[f"{name}.pb"] = W_INIT_STD * rng.standard_normal((d, d))
            params[f"{name}.bb"] = np.zeros(d)
        else:
            params[f"{name}.g"] = np.ones(d)
            params[f"{name}.b"] = np.zeros(d)

    for i in range(cfg.layers):
        p = f"layers.{i}"
        norm_site(f"{p}.ln1")
        params[f"{p}.attn.wq"] = W_INIT_STD * rng.standard_normal((d, d))
        params[f"{p}.attn.wk"] = W_INIT_STD * rng.standard_normal((d, d))
        params[f"{p}.attn.wv"] = W_INIT_STD * rng.standard_normal((d, d))
        params[f"{p}.attn.wo"] = out_std * rng.standard_normal((d, d))
        for b in ("bq", "bk", "bv", "bo"):
            params[f"{p}.attn.{b}"] = np.zeros(d)
        norm_site(f"{p}.ln2")
        params[f"{p}.ffn.w1"] = W_INIT_STD * rng.standard_normal((d, f))
        params[f"{p}.ffn.b1"] = np.zeros(f)
        params[f"{p}.ffn.w2"] = out_std * rng.standard_normal((f, d))
        params[f"{p}.ffn.b2"] = np.zeros(d)
    norm_site("ln_f")
    return params


def count_params(params: dict) -> int:
    return sum(int(v.size) for v in params.values())


# -- transformer stack ----------------------------------------------------------------

def _dropout(x, rate, rng, train):
    if not train or rate <= 0.0:
        return x, None
    if rng is None:
        raise ValidationError("training forward needs an rng for dropout")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def stack_forward(params, cfg: ModelConfig, x, mask, *, stage_vec=None, train=False, rng=None):
    """Run the transformer trunk. x: (T, d) summed embeddings (+ positions).

    stage_vec selects AdaLN conditioning (NAR); None selects plain LayerNorm
    with learned gain/bias (AR). Returns (output (T, d), cache).
    """
    adaln = stage_vec is not None
    cache = {"adaln": adaln, "stage_vec": stage_vec, "layers": [], "mask": mask}
    x, cache["emb_drop"] = _dropout(x, cfg.dropout, rng, train)
    cache["x_in"] = x

    def norm_fwd(name, h):
        xhat, inv = _ln_core_forward(h)
        if adaln:
            a, b = adaln_modulation(
                stage_vec, params[f"{name}.pa"], params[f"{name}.ba"],
                params[f"{name}.pb"], params[f"{name}.bb"],
            )
            return a * xhat + b, {"xhat": xhat, "inv": inv, "a": a}
        g = params[f"{name}.g"]
        return g * xhat + params[f"{name}.b"], {"xhat": xhat, "inv": inv, "g": g}

    h, t = cfg.heads, x.shape[0]
    hd = cfg.head_dim
    for i in range(cfg.layers):
        p = f"layers.{i}"
        lc = {}
        n1, lc["ln1"] = norm_fwd(f"{p}.ln1", x)
        q = n1 @ params[f"{p}.attn.wq"] + params[f"{p}.attn.bq"]
        k = n1 @ params[f"{p}.attn.wk"] + params[f"{p}.attn.bk"]
        v = n1 @ params[f"{p}.attn.wv"] + params[f"{p}.attn.bv"]
        qh = q.reshape(t, h, hd).transpose(1, 0, 2)
        kh = k.reshape(t, h, hd).transpose(1, 0, 2)
        vh = v.reshape(t, h, hd).transpose(1, 0, 2)
        ctx, probs = _attention_forward(qh, kh, vh, mask)
        ctx_flat = ctx.transpose(1, 0, 2).reshape(t, cfg.embed_dim)
        attn_out = ctx_flat @ params[f"{p}.attn.wo"] + params[f"{p}.attn.bo"]
        attn_out, lc["drop1"] = _dropout(attn_out, cfg.dropout, rng, train)
        lc.update(n1=n1, qh=qh, kh=kh, vh=vh, probs=probs, ctx_flat=ctx_flat, x0=x)
        x = x + attn_out

        n2, lc["ln2"] = norm_fwd(f"{p}.ln2", x)
        h1 = n2 @ params[f"{p}.ffn.w1"] + params[f"{p}.ffn.b1"]
        r = np.maximum(h1, 0.0)
        f_out = r @ params[f"{p}.ffn.w2"] + params[f"{p}.ffn.b2"]
        f_out, lc["drop2"] = _dropout(f_out, cfg.dropout, rng, train)
        lc.update(n2=n2, relu=r, x1=x)
        x = x + f_out
        cache["layers"].append(lc)

    out, cache["ln_f"] = norm_fwd("ln_f", x)
    return out, cache


def stack_backward(params, cfg: ModelConfig, cache, dout):
    """Backward through stack_forward. Returns (dx, grads, dstage_vec)."""
    adaln = cache["adaln"]
    stage_vec = cache["stage_vec"]
    grads = {}
    dstage = np.zeros_like(stage_vec) if adaln else None

    def acc(name, g):
        if name in grads:
            grads[name] += g
        else:
            grads[name] = g

    def norm_bwd(name, dy, nc):
        nonlocal dstage
        xhat, inv = nc["xhat"], nc["inv"]
        if adaln:
            da = (dy * xhat).sum(axis=0)
            db = dy.sum(axis=0)
            acc(f"{name}.pa", np.outer(stage_vec, da))
            acc(f"{name}.ba", da)
            acc(f"{name}.pb", np.outer(stage_vec, db))
            acc(f"{name}.bb", db)
            dstage += params[f"{name}.pa"] @ da + params[f"{name}.pb"] @ db
            dxhat = dy * nc["a"]
        else:
            acc(f"{name}.g", (dy * xhat).sum(axis=0))
            acc(f"{name}.b", dy.sum(axis=0))
            dxhat = dy * nc["g"]
        return _ln_core_backward(dxhat, xhat, inv)

    h, hd = cfg.heads, cfg.head_dim
    dx = norm_bwd("ln_f", dout, cache["ln_f"])

    for i in reversed(range(cfg.layers)):
        p = f"layers.{i}"
        lc = cache["layers"][i]
        t = lc["n1"].shape[0]

        # feed-forward branch
        df = dx if lc["drop2"] is None else dx * lc["drop2"]
        acc(f"{p}.ffn.w2", lc["relu"].T @ df)
        acc(f"{p}.ffn.b2", df.sum(axis=0))
        dr = df @ params[f"{p}.ffn.w2"].T
        dh1 = dr * (lc["relu"] > 0.0)
        acc(f"{p}.ffn.w1", lc["n2"].T @ dh1)
        acc(f"{p}.ffn.b1", dh1.sum(axis=0))
        dn2 = dh1 @ params[f"{p}.ffn.w1"].T
        dx = dx + norm_bwd(f"{p}.ln2", dn2, lc["ln2"])

        # attention branch
        da = dx if lc["drop1"] is None else dx * lc["drop1"]
        acc(f"{p}.attn.wo", lc["ctx_flat"].T @ da)
        acc(f"{p}.attn.bo", da.sum(axis=0))
        dctx_flat = da @ params[f"{p}.attn.wo"].T
        dctx = dctx_flat.reshape(t, h, hd).transpose(1, 0, 2)
        dqh, dkh, dvh = _attention_backward(dctx, lc["qh"], lc["kh"], lc["vh"], lc["probs"])
        dq = dqh.transpose(1, 0, 2).reshape(t, cfg.embed_dim)
        dk = dkh.transpose(1, 0, 2).reshape(t, cfg.embed_dim)
        dv = dvh.transpose(1, 0, 2).reshape(t, cfg.embed_dim)
        acc(f"{p}.attn.wq", lc["n1"].T @ dq)
        acc(f"{p}.attn.bq", dq.sum(axis=0))
        acc(f"{p}.attn.wk", lc["n1"].T @ dk)
        acc(f"{p}.attn.bk", dk.sum(axis=0))
        acc(f"{p}.attn.wv", lc["n1"].T @ dv)
        acc(f"{p}.attn.bv", dv.sum(axis=0))
        dn1 = (
            dq @ params[f"{p}.attn.wq"].T
            + dk @ params[f"{p}.attn.wk"].T
            + dv @ params[f"{p}.attn.wv"].T
        )
        dx = dx + norm_bwd(f"{p}.ln1", dn1, lc["ln1"])

    if cache["emb_drop"] is not None:
        dx = dx * cache["emb_drop"]
    return dx, grads, dstage


# -- losses ----------------------------------------------------------------------------

def cross_entropy(logits, targets, loss_mask=None):
    """Mean negative log-likelihood over unmasked positions.

    Returns (loss, dlogits) where dlogits is the gradient of the mean.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if loss_mask is None:
        loss_mask = np.ones(targets.shape, dtype=bool)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    count = int(loss_mask.sum())
    if count == 0:
        raise ValidationError("cross_entropy: all positions are masked")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(targets.size)
    nll = -logp[rows, targets]
    loss = float((nll * loss_mask).sum() / count)
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    dlogits *= (loss_mask[:, None] / count)
    return loss, dlogits


# -- optimizer ---------------------------------------------------------------------------

@dataclass
class AdamWConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def validate(self):
        if self.warmup_steps < 1 or self.total_steps <= self.warmup_steps:
            raise ValidationError("need 1 <= warmup_steps < total_steps")
        if self.peak_lr <= 0:
            raise ValidationError("peak_lr must be positive")


def lr_at(cfg: AdamWConfig, step: int) -> float:
    """Linear warmup to peak at `warmup_steps`, then linear decay to zero at
    `total_steps`."""
    if step < 1:
        raise ValidationError("schedule step starts at 1")
    up = step / cfg.warmup_steps
    down = max(0.0, (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps))
    return cfg.peak_lr * min(up, down)


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state: AdamWState, step: int, cfg: AdamWConfig) -> float:
    """Standard decoupled-weight-decay Adam update, in place; returns the lr."""
    lr = lr_at(cfg, step)
    for name in sorted(grads):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient in parameter block {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        mhat = m / (1.0 - cfg.beta1**step)
        vhat = v / (1.0 - cfg.beta2**step)
        params[name] -= lr * (mhat / (np.sqrt(vhat) + cfg.eps) + cfg.weight_decay * params[name])
    return lr


# -- sampling ---------------------------------------------------------------------------

def nucleus_sample(logits, temperature: float, top_p: float, rng: np.random.Generator) -> int:
    """Temperature + top-p sampling; temperature 0 means greedy argmax."""
    logits = np.asarray(logits, dtype=np.float64)
    if temperature < 0:
        raise ValidationError("temperature must be nonnegative")
    if not 0.0 < top_p <= 1.0:
        raise ValidationError("top_p must lie in (0, 1]")
    if temperature == 0.0:
        return int(np.argmax(logits))
    shifted = logits / temperature
    shifted -= shifted.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    cut = int(np.searchsorted(csum, top_p)) + 1
    kept = order[:cut]
    kept_probs = probs[kept]
    kept_probs /= kept_probs.sum()
    r = rng.random()
    idx = int(np.searchsorted(np.cumsum(kept_probs), r))
    return int(kept[min(idx, cut - 1)])


# -- gradient checking --------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    probes: list
    worst: tuple | None

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(
    loss_fn,
    params: dict,
    *,
    param_names=None,
    n_probe: int = 64,
    step: float = 1e-4,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backprop gradients against central finite differences.

    `loss_fn(params) -> (loss, grads)` must be deterministic (dropout off).
    Probes are drawn uniformly over the coordinates of `param_names` (all
    names by default). The relative error uses a small floor so coordinates
    with near-zero gradient compare absolutely.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = loss_fn(work)
    names = sorted(param_names) if param_names is not None else sorted(grads)
    sizes = np.array([work[n].size for n in names])
    total = int(sizes.sum())
    probes = []
    max_rel = 0.0
    worst = None
    for _ in range(n_probe):
        flat = int(rng.integers(total))
        sel = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        name = names[sel]
        idx = flat - int(np.cumsum(sizes)[sel]) + work[name].size
        orig = work[name].flat[idx]
        work[name].flat[idx] = orig + step
        lo_plus, _ = loss_fn(work)
        work[name].flat[idx] = orig - step
        lo_minus, _ = loss_fn(work)
        work[name].flat[idx] = orig
        fd = (lo_plus - lo_minus) / (2.0 * step)
        bp = float(grads[name].flat[idx]) if name in grads else 0.0
        rel = abs(fd - bp) / max(abs(fd), abs(bp), floor)
        probes.append((name, int(idx), bp, fd, rel))
        if rel > max_rel:
            max_rel = rel
            worst = probes[-1]
    return GradCheckReport(max_rel_error=max_rel, probes=probes, worst=worst)


# -- checkpoints ----------------------------------------------------------------------------

CHECKPOINT_FORMAT = "1"


def save_model(path, kind: str, cfg: ModelConfig, params: dict, extra: dict | None = None):
    config = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "layers": cfg.layers,
        "heads": cfg.heads,
        "embed_dim": cfg.embed_dim,
        "ffn_dim": cfg.ffn_dim,
        "dropout": repr(cfg.dropout),
        "phoneme_vocab": cfg.phoneme_vocab,
        "codebook_size": cfg.codebook_size,
        "quantizers": cfg.quantizers,
        "max_len": cfg.max_len,
        "phoneme_table": frontend.vocab_table(),
    }
    if extra:
        config.update(extra)
    formats.write_checkpoint(path, config, params)


def load_model(path):
    """Returns (kind, ModelConfig, params, raw config dict)."""
    config, params = formats.read_checkpoint(path)
    cfg = ModelConfig(
        layers=int(config["layers"]),
        heads=int(config["heads"]),
        embed_dim=int(config["embed_dim"]),
        ffn_dim=int(config["ffn_dim"]),
        dropout=float(config["dropout"]),
        phoneme_vocab=int(config["phoneme_vocab"]),
        codebook_size=int(config["codebook_size"]),
        quantizers=int(config["quantizers"]),
        max_len=int(config["max_len"]),
    )
    cfg.validate()
    return config["kind"], cfg, params, config
