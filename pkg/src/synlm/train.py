"""AdamW training loop with dev-loss early stopping.

One optimizer owns the parameters; batches are evaluated example by
example as independent graphs joined by a single sum node, so gradients
reduce deterministically in batch order.  Dropout noise is derived from
(seed, epoch, step, example) so a rerun with the same seed is
bit-identical.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .transitions import head_masks, oracle, sync_ngrams
from .treebank import tree_yield
from .vocab import (EmptyCorpus, build_joint_vocab, build_ngram_vocab,
                    build_token_vocab)

log = logging.getLogger(__name__)


class TrainError(ValueError):
    pass


class VocabMismatch(TrainError):
    """Model config and vocabulary sizes disagree."""


class NumericFailure(RuntimeError):
    """Loss went NaN/Inf during optimization."""


@dataclass
class TrainConfig:
    lr: float = 1e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 5
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0
    loss_norm: str = "token"  # "token": per-target mean; "sequence": per-example mean
    grad_clip: float | None = None
    sclm_lambda: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.patience < 1:
            raise TrainError("lr > 0, batch_size >= 1, patience >= 1 required")
        if self.loss_norm not in ("token", "sequence"):
            raise TrainError(f"unknown loss_norm: {self.loss_norm!r}")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# AdamW

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _decays(name: str) -> bool:
    """Weight decay skips layernorm parameters and embedding tables."""
    return not (name in ("wte", "wpe", "wout", "scaffold")
                or ".ln" in name or name.startswith("lnf"))


def adamw_step(params: dict, grads: dict, state: AdamWState,
               config: TrainConfig):
    """One decoupled-weight-decay Adam update, in place.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
    """
    b1, b2 = config.betas
    state.step += 1
    t = state.step
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise T.ShapeMismatch(f"grad shape {g.shape} for param {name} "
                                  f"{p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        update = mhat / (np.sqrt(vhat) + config.eps)
        if config.weight_decay and _decays(name):
            update = update + config.weight_decay * p.data
        p.data -= config.lr * update
    return params, state


def clip_grads(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# ---------------------------------------------------------------------------
# corpus preparation

def build_vocabs(variant: str, train_trees, dev_trees, min_count: int = 1) -> dict:
    """Fit the vocabularies a variant needs.

    Tokens come from the training trees only (dev OOVs become UNK).
    Nonterminal labels and scaffold ngrams are fitted on train + dev so
    dev monitoring never hits an unknown label.
    """
    if not train_trees:
        raise EmptyCorpus("no training trees")
    vocabs = {"tokens": build_token_vocab(train_trees, min_count)}
    both = list(train_trees) + list(dev_trees or [])
    if variant in M.PLM_VARIANTS:
        vocabs["joint"] = build_joint_vocab(vocabs["tokens"], both)
    if variant in M.SCLM_VARIANTS:
        vocabs["ngrams"] = build_ngram_vocab(oracle(t) for t in both)
    return vocabs


def model_config_for(variant: str, vocabs: dict, **overrides) -> M.ModelConfig:
    vocab_size = len(vocabs["joint"]) if variant in M.PLM_VARIANTS \
        else len(vocabs["tokens"])
    ngram_size = len(vocabs["ngrams"]) if variant in M.SCLM_VARIANTS else 0
    return M.ModelConfig(vocab_size=vocab_size, variant=variant,
                         ngram_vocab_size=ngram_size, **overrides)


def prepare_examples(variant: str, trees, vocabs: dict) -> list:
    """Pre-encode per-tree training examples; reused across epochs."""
    examples = []
    for tree in trees:
        if variant in M.PLM_VARIANTS:
            actions = oracle(tree)
            ids = vocabs["joint"].encode_sequence(actions)
            rows = head_masks(actions)[:-1] if variant == M.PLM_MASK else None
            examples.append(("plm", ids, rows, len(ids) - 1))
        elif variant in M.SCLM_VARIANTS:
            segments, _ = sync_ngrams(oracle(tree))
            ids = vocabs["tokens"].encode_words([s.word for s in segments])
            gt, gw = M.scaffold_targets(segments, variant, vocabs["ngrams"])
            examples.append(("sclm", ids, (gt, gw), len(ids) - 1))
        else:
            ids = vocabs["tokens"].encode_words(tree_yield(tree))
            examples.append(("lm", ids, None, len(ids) - 1))
    return examples


def example_loss(config, params, example, train_config, dropout_rng=None):
    """Sum-reduced loss of one prepared example."""
    kind, ids, aux, _ = example
    if kind == "plm":
        return M.plm_loss_from_ids(config, params, ids, aux, "sum", dropout_rng)
    if kind == "sclm":
        gt, gw = aux
        return M.sclm_loss_from_ids(config, params, ids, gt, gw,
                                    train_config.sclm_lambda, "sum", dropout_rng)
    return M.lm_loss_from_ids(config, params, ids, "sum", dropout_rng)


# ---------------------------------------------------------------------------
# the loop

@dataclass
class TrainResult:
    params: dict
    history: list
    best_epoch: int
    best_dev_loss: float
    steps: int


def evaluate_loss(config, params, examples, train_config) -> float:
    """Per-target mean loss without dropout or graph building."""
    total, count = 0.0, 0
    with T.no_grad():
        for example in examples:
            total += example_loss(config, params, example, train_config).item()
            count += example[3]
    return total / max(count, 1)


def train(model_config: M.ModelConfig, train_trees, dev_trees, vocabs: dict,
          train_config: TrainConfig, on_epoch=None) -> TrainResult:
    """Optimize from scratch; returns the best-dev parameters.

    history holds one record per epoch and split:
    {"epoch", "split", "loss", "tokens", "wallclock"}.
    """
    if not train_trees:
        raise EmptyCorpus("no training trees")
    expected = len(vocabs["joint"]) if model_config.variant in M.PLM_VARIANTS \
        else len(vocabs["tokens"])
    if model_config.vocab_size != expected:
        raise VocabMismatch(f"config vocab_size {model_config.vocab_size} != "
                            f"vocabulary size {expected}")
    variant = model_config.variant
    examples = prepare_examples(variant, train_trees, vocabs)
    dev_examples = prepare_examples(variant, dev_trees, vocabs) if dev_trees else []
    params = M.init_params(model_config, train_config.seed)
    opt_state = AdamWState()
    history = []
    best = {"epoch": 0, "loss": float("inf"), "params": None}
    bad_epochs = 0
    step = 0
    t0 = time.monotonic()
    for epoch in range(1, train_config.max_epochs + 1):
        order = np.random.default_rng((train_config.seed, epoch)).permutation(
            len(examples))
        epoch_nll, epoch_tokens = 0.0, 0
        for lo in range(0, len(order), train_config.batch_size):
            batch = [examples[i] for i in order[lo:lo + train_config.batch_size]]
            step += 1
            losses = []
            for k, example in enumerate(batch):
                rng = np.random.default_rng(
                    (train_config.seed, epoch, step, k)) \
                    if model_config.dropout_p > 0 else None
                losses.append(example_loss(model_config, params, example,
                                           train_config, rng))
            denom = sum(ex[3] for ex in batch) \
                if train_config.loss_norm == "token" else len(batch)
            batch_loss = T.scale(T.add_n(losses), 1.0 / denom)
            if not np.isfinite(batch_loss.item()):
                raise NumericFailure(f"non-finite loss at step {step}")
            T.zero_grads(params)
            batch_loss.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            if train_config.grad_clip:
                clip_grads(grads, train_config.grad_clip)
            adamw_step(params, grads, opt_state, train_config)
            epoch_nll += sum(l.item() for l in losses)
            epoch_tokens += sum(ex[3] for ex in batch)
        train_loss = epoch_nll / max(epoch_tokens, 1)
        history.append({"epoch": epoch, "split": "train", "loss": train_loss,
                        "tokens": epoch_tokens, "wallclock": time.monotonic() - t0})
        if dev_examples:
            dev_loss = evaluate_loss(model_config, params, dev_examples,
                                     train_config)
            dev_tokens = sum(ex[3] for ex in dev_examples)
            history.append({"epoch": epoch, "split": "dev", "loss": dev_loss,
                            "tokens": dev_tokens,
                            "wallclock": time.monotonic() - t0})
        else:
            dev_loss = train_loss
        log.info("epoch %d train %.4f dev %.4f", epoch, train_loss, dev_loss)
        if on_epoch is not None:
            on_epoch(epoch, history)
        if dev_loss < best["loss"]:
            best = {"epoch": epoch, "loss": dev_loss,
                    "params": {k: p.data.copy() for k, p in params.items()}}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best["epoch"])
                break
    final = {k: T.parameter(v) for k, v in best["params"].items()} \
        if best["params"] is not None else params
    return TrainResult(final, history, best["epoch"], best["loss"], step)


def write_metrics(history, path) -> None:
    """Line-delimited JSON records, one per epoch/split."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
