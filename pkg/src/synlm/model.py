"""Decoder-only Transformer over words or joint action sequences.

Five variants share one trunk:

- "lm"         vanilla word-level language model
- "sclm-past"  word LM + scaffold head predicting the action ngram that
               preceded the previous word
- "sclm-next"  word LM + scaffold head predicting the action ngram that
               precedes the word being predicted
- "plm"        language model over the full joint action sequence
- "plm-mask"   plm with heads 0/1 of every layer hard-masked to the
               stack / outside partition of history

Blocks are pre-layernorm residual with a final layernorm, learned absolute
position embeddings, tanh-GELU feed-forward of width ff_mult*H, and
1/sqrt(head_dim) scaled dot-product attention; the output head is tied to
the input embedding table unless configured otherwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .transitions import head_masks
from .vocab import (JointActionVocab, NGramVocab, TokenVocab, NGRAM_PAD_ID,
                    NGRAM_BLANK_ID)

LM = "lm"
SCLM_PAST = "sclm-past"
SCLM_NEXT = "sclm-next"
PLM = "plm"
PLM_MASK = "plm-mask"
VARIANTS = (LM, SCLM_PAST, SCLM_NEXT, PLM, PLM_MASK)
SCLM_VARIANTS = (SCLM_PAST, SCLM_NEXT)
PLM_VARIANTS = (PLM, PLM_MASK)


class ModelError(ValueError):
    pass


class TooLong(ModelError):
    """Input exceeds max_len positions."""


class MaskMismatch(ModelError):
    """Structural masks missing or inconsistent with the input length."""


class VariantMismatch(ModelError):
    """Operation applied to a variant it is not defined for."""


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    variant: str
    hidden_size: int = 128
    n_heads: int = 4
    n_layers: int = 4
    ff_mult: int = 4
    max_len: int = 256
    dropout_p: float = 0.1
    ngram_vocab_size: int = 0
    tied_output: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant: {self.variant!r}")
        if self.hidden_size % self.n_heads != 0:
            raise ModelError("hidden_size must be divisible by n_heads")
        if self.variant == PLM_MASK and self.n_heads < 3:
            raise ModelError("plm-mask needs >= 3 heads (2 constrained + >= 1 free)")
        if self.variant in SCLM_VARIANTS and self.ngram_vocab_size < 2:
            raise ModelError("scaffold variants need an ngram vocabulary")
        if self.variant not in SCLM_VARIANTS and self.ngram_vocab_size != 0:
            raise ModelError("ngram_vocab_size only applies to scaffold variants")
        if self.vocab_size < 3 or self.max_len < 1:
            raise ModelError("bad vocab_size or max_len")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(**d)


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count.

    V*H + max_len*H                         embeddings
    + M * (4H^2 + 2FH + F + 5H)             per layer (qkv+o, ff, 2 layernorms)
    + 2H                                    final layernorm
    + V*H if untied, + G*H for scaffold variants
    with F = ff_mult*H.
    """
    h, f = config.hidden_size, config.ff_mult * config.hidden_size
    total = config.vocab_size * h + config.max_len * h
    total += config.n_layers * (4 * h * h + 2 * f * h + f + 5 * h)
    total += 2 * h
    if not config.tied_output:
        total += config.vocab_size * h
    total += config.ngram_vocab_size * h
    return total


def init_params(config: ModelConfig, seed: int = 0) -> dict:
    """Seeded parameter initialization, N(0, 0.02) weights.

    Draw order is fixed (trunk first, variant-specific tables last) so two
    configs differing only in variant share bit-identical trunk weights
    for the same seed.
    """
    rng = np.random.default_rng(seed)
    dtype = T.get_default_dtype()
    params = {}

    def normal(name, shape):
        params[name] = T.parameter(
            (rng.standard_normal(shape) * 0.02).astype(dtype))

    def const(name, shape, value):
        params[name] = T.parameter(np.full(shape, value, dtype=dtype))

    h, f, hd = config.hidden_size, config.ff_mult * config.hidden_size, config.head_dim
    normal("wte", (config.vocab_size, h))
    normal("wpe", (config.max_len, h))
    for m in range(config.n_layers):
        const(f"h{m}.ln1.g", (h,), 1.0)
        const(f"h{m}.ln1.b", (h,), 0.0)
        for n in range(config.n_heads):
            normal(f"h{m}.attn.q{n}", (hd, h))
            normal(f"h{m}.attn.k{n}", (hd, h))
            normal(f"h{m}.attn.v{n}", (hd, h))
        normal(f"h{m}.attn.o", (h, h))
        const(f"h{m}.ln2.g", (h,), 1.0)
        const(f"h{m}.ln2.b", (h,), 0.0)
        normal(f"h{m}.ff.w1", (f, h))
        const(f"h{m}.ff.b1", (f,), 0.0)
        normal(f"h{m}.ff.w2", (h, f))
        const(f"h{m}.ff.b2", (h,), 0.0)
    const("lnf.g", (h,), 1.0)
    const("lnf.b", (h,), 0.0)
    if not config.tied_output:
        normal("wout", (config.vocab_size, h))
    if config.variant in SCLM_VARIANTS:
        normal("scaffold", (config.ngram_vocab_size, h))
    assert sum(p.data.size for p in params.values()) == param_count(config)
    return params


def _structural_mask(t: int, rows=None, which: str = "stack") -> np.ndarray:
    """Additive [keys, queries] mask from per-query visibility rows.

    With rows=None every past position is visible, which is exactly the
    causal mask (keys > query are never filled in).
    """
    mask = np.full((t, t), -np.inf)
    for q in range(t):
        if rows is None:
            mask[: q + 1, q] = 0.0
        else:
            visible = rows[q].stack_visible if which == "stack" else rows[q].outside_visible
            mask[: q + 1, q] = np.where(visible, 0.0, -np.inf)
    return mask


def attention_masks(config: ModelConfig, t: int, mask_rows=None) -> list:
    """Per-head additive masks, one [t,t] array per head.

    Heads 0/1 get the stack/outside structural masks for plm-mask; all
    other heads (and all heads of other variants) get the causal mask.
    """
    causal = _structural_mask(t, None)
    if config.variant != PLM_MASK:
        if mask_rows is not None:
            raise VariantMismatch(f"structural masks passed to variant {config.variant}")
        return [causal] * config.n_heads
    if mask_rows is None:
        raise MaskMismatch("plm-mask forward requires structural mask rows")
    if len(mask_rows) != t or any(len(r.stack_visible) != q + 1
                                  for q, r in enumerate(mask_rows)):
        raise MaskMismatch(f"mask rows inconsistent with input length {t}")
    stack = _structural_mask(t, mask_rows, "stack")
    outside = _structural_mask(t, mask_rows, "outside")
    return [stack, outside] + [causal] * (config.n_heads - 2)


def _trunk(config, params, ids, masks, dropout_rng=None, collect_attn=None):
    """Shared decoder stack; returns the final hidden states [t, H]."""
    ids = np.asarray(ids, dtype=np.int64)
    t = ids.shape[0]
    if t < 1:
        raise ModelError("empty input")
    if t > config.max_len:
        raise TooLong(f"{t} positions exceeds max_len={config.max_len}")
    p, scale_qk = config.dropout_p, 1.0 / math.sqrt(config.head_dim)
    x = T.add(T.embedding_lookup(params["wte"], ids),
              T.embedding_lookup(params["wpe"], np.arange(t)))
    x = T.dropout(x, p, dropout_rng)
    for m in range(config.n_layers):
        a = T.layernorm(x, params[f"h{m}.ln1.g"], params[f"h{m}.ln1.b"])
        heads = []
        for n in range(config.n_heads):
            q = T.matmul(a, T.transpose(params[f"h{m}.attn.q{n}"]))
            k = T.matmul(a, T.transpose(params[f"h{m}.attn.k{n}"]))
            v = T.matmul(a, T.transpose(params[f"h{m}.attn.v{n}"]))
            scores = T.scale(T.matmul(k, T.transpose(q)), scale_qk)
            attn = T.masked_softmax(scores, masks[n])  # [keys, queries]
            if collect_attn is not None:
                collect_attn[(m, n)] = attn.data
            heads.append(T.matmul(T.transpose(attn), v))
        proj = T.matmul(T.concat_cols(heads), T.transpose(params[f"h{m}.attn.o"]))
        x = T.add(x, T.dropout(proj, p, dropout_rng))
        b = T.layernorm(x, params[f"h{m}.ln2.g"], params[f"h{m}.ln2.b"])
        ff = T.gelu(T.add(T.matmul(b, T.transpose(params[f"h{m}.ff.w1"])),
                          params[f"h{m}.ff.b1"]))
        ff = T.add(T.matmul(ff, T.transpose(params[f"h{m}.ff.w2"])),
                   params[f"h{m}.ff.b2"])
        x = T.add(x, T.dropout(ff, p, dropout_rng))
    return T.layernorm(x, params["lnf.g"], params["lnf.b"])


def _output_table(config, params):
    return params["wte"] if config.tied_output else params["wout"]


def forward(config, params, action_ids, masks=None, dropout_rng=None,
            collect_attn=None):
    """Next-token logits for every position.

    Returns (logits [t, vocab], hidden [H, t]); logits at position p score
    the distribution over the action at p+1.  ``masks`` is the list of
    HeadMaskRow for plm-mask (one per position) and must be None otherwise.
    """
    t = len(action_ids)
    mask_arrays = attention_masks(config, t, masks)
    h = _trunk(config, params, action_ids, mask_arrays, dropout_rng, collect_attn)
    logits = T.matmul(h, T.transpose(_output_table(config, params)))
    return logits, T.transpose(h)


def scaffold_forward(config, params, word_ids, dropout_rng=None):
    """Word and ngram logits off the same hidden states (scaffold variants)."""
    if config.variant not in SCLM_VARIANTS:
        raise VariantMismatch(f"scaffold_forward on variant {config.variant}")
    t = len(word_ids)
    mask_arrays = attention_masks(config, t, None)
    h = _trunk(config, params, word_ids, mask_arrays, dropout_rng)
    word_logits = T.matmul(h, T.transpose(_output_table(config, params)))
    ngram_logits = T.matmul(h, T.transpose(params["scaffold"]))
    return word_logits, ngram_logits


def plm_loss(config, params, actions, joint_vocab: JointActionVocab,
             reduction: str = "mean", dropout_rng=None):
    """Cross-entropy over all next-action predictions of one oracle.

    For plm-mask the structural masks are derived from the actions.
    """
    if config.variant not in PLM_VARIANTS:
        raise VariantMismatch(f"plm_loss on variant {config.variant}")
    ids = joint_vocab.encode_sequence(actions)
    rows = head_masks(actions)[:-1] if config.variant == PLM_MASK else None
    return plm_loss_from_ids(config, params, ids, rows, reduction, dropout_rng)


def plm_loss_from_ids(config, params, ids, mask_rows=None, reduction="mean",
                      dropout_rng=None):
    if len(ids) < 2:
        raise ModelError("need at least one prediction")
    logits, _ = forward(config, params, ids[:-1], mask_rows, dropout_rng)
    loss = T.cross_entropy_rows(logits, ids[1:])
    if reduction == "mean":
        loss = T.scale(loss, 1.0 / (len(ids) - 1))
    elif reduction != "sum":
        raise ModelError(f"unknown reduction: {reduction!r}")
    return loss


def scaffold_targets(segments, variant: str, ngram_vocab: NGramVocab):
    """ngram-head target ids and loss weights, one per word position.

    sclm-next predicts the ngram preceding the word being predicted;
    sclm-past predicts the ngram of the previous word, with a zero-weight
    PAD target at the first position.
    """
    ngram_ids = [ngram_vocab.encode(seg.preceding_ngram) for seg in segments]
    if variant == SCLM_NEXT:
        targets = ngram_ids
        weights = [1.0] * len(targets)
    elif variant == SCLM_PAST:
        targets = [NGRAM_PAD_ID] + ngram_ids[:-1]
        weights = [0.0] + [1.0] * (len(targets) - 1)
    else:
        raise VariantMismatch(f"scaffold_targets on variant {variant}")
    return np.array(targets, dtype=np.int64), np.array(weights)


def sclm_loss(config, params, segments, token_vocab: TokenVocab,
              ngram_vocab: NGramVocab, lam: float = 1.0,
              reduction: str = "mean", dropout_rng=None):
    """Word NLL plus lam * scaffold-ngram NLL over one segmented sentence.

    lam=0 equals the vanilla LM loss on the same words exactly.
    """
    words = [seg.word for seg in segments]
    ids = token_vocab.encode_words(words)
    gtargets, gweights = scaffold_targets(segments, config.variant, ngram_vocab)
    return sclm_loss_from_ids(config, params, ids, gtargets, gweights, lam,
                              reduction, dropout_rng)


def sclm_loss_from_ids(config, params, ids, gtargets, gweights, lam=1.0,
                       reduction="mean", dropout_rng=None):
    if len(ids) < 2:
        raise ModelError("need at least one word")
    word_logits, ngram_logits = scaffold_forward(config, params, ids[:-1],
                                                 dropout_rng)
    loss = T.cross_entropy_rows(word_logits, ids[1:])
    if lam != 0.0:
        gloss = T.cross_entropy_rows(ngram_logits, gtargets, gweights)
        loss = T.add(loss, T.scale(gloss, lam))
    if reduction == "mean":
        loss = T.scale(loss, 1.0 / (len(ids) - 1))
    elif reduction != "sum":
        raise ModelError(f"unknown reduction: {reduction!r}")
    return loss


def lm_loss(config, params, words, token_vocab: TokenVocab,
            reduction: str = "mean", dropout_rng=None):
    """Word NLL for the vanilla LM (also the word term of scaffold models)."""
    if config.variant in PLM_VARIANTS:
        raise VariantMismatch(f"lm_loss on variant {config.variant}")
    ids = token_vocab.encode_words(words)
    return lm_loss_from_ids(config, params, ids, reduction, dropout_rng)


def lm_loss_from_ids(config, params, ids, reduction="mean", dropout_rng=None):
    if len(ids) < 2:
        raise ModelError("need at least one word")
    if config.variant in SCLM_VARIANTS:
        logits, _ = scaffold_forward(config, params, ids[:-1], dropout_rng)
    else:
        logits, _ = forward(config, params, ids[:-1], None, dropout_rng)
    loss = T.cross_entropy_rows(logits, ids[1:])
    if reduction == "mean":
        loss = T.scale(loss, 1.0 / (len(ids) - 1))
    elif reduction != "sum":
        raise ModelError(f"unknown reduction: {reduction!r}")
    return loss


# ---------------------------------------------------------------------------
# incremental decoding (inference only, plain numpy, per-position KV caches)

def _ln_np(x, g, b, eps=1e-5):
    mu = x.mean()
    var = x.var()
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu_np(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi)
                                    * (x + 0.044715 * x ** 3)))


class DecoderState:
    """Immutable per-hypothesis cache: shared tuples, cheap to fork."""

    __slots__ = ("length", "caches")

    def __init__(self, length, caches):
        self.length = length
        self.caches = caches


class IncrementalDecoder:
    """Frozen-weight single-position forward with persistent KV caches.

    Matches the training forward numerically (same op order per position)
    up to float round-off; the beam module relies on this for hypothesis
    scoring.
    """

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        w = {k: p.data for k, p in params.items()}
        self.wte = w["wte"]
        self.wpe = w["wpe"]
        self.out_table = w["wte"] if config.tied_output else w["wout"]
        self.lnf = (w["lnf.g"], w["lnf.b"])
        self.layers = []
        for m in range(config.n_layers):
            self.layers.append({
                "ln1": (w[f"h{m}.ln1.g"], w[f"h{m}.ln1.b"]),
                "q": np.stack([w[f"h{m}.attn.q{n}"] for n in range(config.n_heads)]),
                "k": np.stack([w[f"h{m}.attn.k{n}"] for n in range(config.n_heads)]),
                "v": np.stack([w[f"h{m}.attn.v{n}"] for n in range(config.n_heads)]),
                "o": w[f"h{m}.attn.o"],
                "ln2": (w[f"h{m}.ln2.g"], w[f"h{m}.ln2.b"]),
                "ff": (w[f"h{m}.ff.w1"], w[f"h{m}.ff.b1"],
                       w[f"h{m}.ff.w2"], w[f"h{m}.ff.b2"]),
            })
        self.scale = 1.0 / math.sqrt(config.head_dim)
        self.masked = config.variant == PLM_MASK

    def start(self) -> DecoderState:
        return DecoderState(0, tuple(((), ()) for _ in self.layers))

    def step(self, state: DecoderState, action_id: int, mask_row=None):
        """Consume one action; returns (new state, next-action logprobs [V]).

        ``mask_row`` is the HeadMaskRow for this query (plm-mask only),
        covering positions 0..state.length.
        """
        config = self.config
        pos = state.length
        if pos >= config.max_len:
            raise TooLong(f"position {pos} exceeds max_len={config.max_len}")
        if self.masked:
            if mask_row is None or len(mask_row.stack_visible) != pos + 1:
                raise MaskMismatch(f"bad mask row at position {pos}")
        elif mask_row is not None:
            raise VariantMismatch("mask row passed to unmasked variant")
        x = self.wte[action_id] + self.wpe[pos]
        new_caches = []
        for layer in self.layers:
            a = _ln_np(x, *layer["ln1"])
            q = layer["q"] @ a  # [N, hd]
            k = layer["k"] @ a
            v = layer["v"] @ a
            ks = state.caches[len(new_caches)][0] + (k,)
            vs = state.caches[len(new_caches)][1] + (v,)
            keys = np.stack(ks)  # [t, N, hd]
            values = np.stack(vs)
            scores = np.einsum("tnh,nh->nt", keys, q) * self.scale  # [N, t]
            if self.masked:
                scores[0, ~mask_row.stack_visible] = -np.inf
                scores[1, ~mask_row.outside_visible] = -np.inf
            m = scores.max(axis=1, keepdims=True)
            e = np.exp(scores - m)
            attn = e / e.sum(axis=1, keepdims=True)
            pooled = np.einsum("nt,tnh->nh", attn, values)
            x = x + layer["o"] @ pooled.reshape(-1)
            b = _ln_np(x, *layer["ln2"])
            w1, b1, w2, b2 = layer["ff"]
            x = x + (w2 @ _gelu_np(w1 @ b + b1) + b2)
            new_caches.append((ks, vs))
        h = _ln_np(x, *self.lnf)
        logits = self.out_table @ h
        zmax = logits.max()
        logprobs = logits - (zmax + np.log(np.exp(logits - zmax).sum()))
        return DecoderState(pos + 1, tuple(new_caches)), logprobs


# ---------------------------------------------------------------------------
# exact sequence scoring (no beam): per-step log-probabilities

def joint_logprobs(config, params, actions, joint_vocab) -> np.ndarray:
    """log p(a_i | a_<i) for i = 1..R-1 under a plm/plm-mask model."""
    if config.variant not in PLM_VARIANTS:
        raise VariantMismatch(f"joint_logprobs on variant {config.variant}")
    ids = joint_vocab.encode_sequence(actions)
    rows = head_masks(actions)[:-1] if config.variant == PLM_MASK else None
    return _sequence_logprobs(config, params, ids, rows)


def word_logprobs(config, params, words, token_vocab) -> np.ndarray:
    """log p(w_t | w_<t) for every word under an lm/sclm model."""
    if config.variant in PLM_VARIANTS:
        raise VariantMismatch(f"word_logprobs on variant {config.variant}")
    ids = token_vocab.encode_words(words)
    return _sequence_logprobs(config, params, ids, None)


def _sequence_logprobs(config, params, ids, mask_rows) -> np.ndarray:
    with T.no_grad():
        if config.variant in SCLM_VARIANTS:
            logits, _ = scaffold_forward(config, params, ids[:-1])
        else:
            logits, _ = forward(config, params, ids[:-1], mask_rows)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    logz = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(len(ids) - 1)
    return z[rows, np.asarray(ids[1:])] - logz


# ---------------------------------------------------------------------------
# checkpoints: one-line JSON manifest + raw little-endian float32 payload

_CKPT_VERSION = 1


def save_checkpoint(path, config: ModelConfig, params: dict, vocabs: dict,
                    extra: dict | None = None) -> None:
    """Write manifest + tensor payload.

    ``vocabs`` maps names from {"tokens", "joint", "ngrams"} to vocabulary
    objects; their forms are inlined (a checkpoint is self-contained) and
    their digests recorded.
    """
    names = sorted(params)
    tensors = {}
    offset = 0
    for name in names:
        arr = params[name].data
        tensors[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size * 4
    manifest = {
        "format_version": _CKPT_VERSION,
        "config": config.to_dict(),
        "variant": config.variant,
        "endianness": "little",
        "dtype": "float32",
        "vocab_digests": {k: v.digest() for k, v in vocabs.items()},
        "vocabs": {k: list(v.forms) for k, v in vocabs.items()},
        "tensors": tensors,
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(blob.encode("utf-8") + b"\n")
        for name in names:
            fh.write(params[name].data.astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns (config, params, vocabs, extra); inverse of save_checkpoint."""
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if manifest.get("format_version") != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version in {path}")
    if manifest["endianness"] != "little" or manifest["dtype"] != "float32":
        raise CheckpointError("unsupported payload encoding")
    config = ModelConfig.from_dict(manifest["config"])
    params = {}
    for name, info in manifest["tensors"].items():
        shape = tuple(info["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = info["offset"]
        arr = np.frombuffer(payload[start:start + size * 4], dtype="<f4")
        if arr.size != size:
            raise CheckpointError(f"truncated payload for tensor {name}")
        data = arr.reshape(shape).astype(T.get_default_dtype())
        params[name] = T.parameter(data)
    vocabs = {}
    for kind, forms in manifest["vocabs"].items():
        cls = {"tokens": TokenVocab, "ngrams": NGramVocab,
               "joint": JointActionVocab}[kind]
        vocabs[kind] = cls.from_forms(forms) if kind == "joint" else cls(forms)
        if vocabs[kind].digest() != manifest["vocab_digests"][kind]:
            raise CheckpointError(f"vocabulary digest mismatch for {kind!r}")
    return config, params, vocabs, manifest.get("extra", {})
