"""Self-contained correctness checks runnable from the command line.

These back `synlm gradcheck` and `synlm selftest`.  Each check returns a
(name, ok, detail) tuple; detail is a short human-readable measurement.
The gradient checks compare tape gradients against central finite
differences in float64, which only uses forward evaluations and so cannot
inherit a backward-pass bug.
"""

from __future__ import annotations

import numpy as np

from . import model as M
from . import tensor as T
from .beam import BeamConfig, BeamSearch
from .synthdata import enumerate_joint, enumerate_word_marginals
from .transitions import (BOS, DEFAULT_LEGALITY, INITIAL_STATE, REDUCE, apply,
                          gen, head_masks, legal_actions, nt, oracle,
                          reconstruct, sync_ngrams)
from .treebank import Tree, parse_tree, tree_yield
from .vocab import (JointActionVocab, TokenVocab, build_joint_vocab,
                    build_ngram_vocab, build_token_vocab)

# two tiny sentences; joint vocabulary: 3 reserved + 4 words + REDUCE + 3
# labels = 11 symbols
_TINY_TREES = [parse_tree("(S (NP the dog) (VP runs))"),
               parse_tree("(S (NP the big dog) (VP runs))")]


def tiny_fixture(variant: str):
    """A deliberately small model/loss pair for end-to-end gradient checks."""
    trees = _TINY_TREES
    tokens = build_token_vocab(trees)
    joint = build_joint_vocab(tokens, trees)
    oracles = [oracle(t) for t in trees]
    ngrams = build_ngram_vocab(oracles)
    vocab_size = len(joint) if variant in M.PLM_VARIANTS else len(tokens)
    config = M.ModelConfig(
        vocab_size=vocab_size, variant=variant, hidden_size=16, n_heads=4,
        n_layers=2, ff_mult=2, max_len=32, dropout_p=0.0,
        ngram_vocab_size=len(ngrams) if variant in M.SCLM_VARIANTS else 0)

    def loss_fn(params):
        losses = []
        for tree, acts in zip(trees, oracles):
            if variant in M.PLM_VARIANTS:
                losses.append(M.plm_loss(config, params, acts, joint, "sum"))
            elif variant in M.SCLM_VARIANTS:
                segments, _ = sync_ngrams(acts)
                losses.append(M.sclm_loss(config, params, segments, tokens,
                                          ngrams, lam=1.0, reduction="sum"))
            else:
                losses.append(M.lm_loss(config, params, tree_yield(tree),
                                        tokens, "sum"))
        return T.add_n(losses)

    return config, loss_fn


def gradcheck_variant(variant: str, seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error between tape and finite-difference gradients."""
    with T.default_dtype(np.float64):
        config, loss_fn = tiny_fixture(variant)
        params = M.init_params(config, seed)
        T.zero_grads(params)
        loss_fn(params).backward()
        fd = T.finite_diff_grad(lambda: loss_fn(params).item(), params, h=h)
        worst = 0.0
        for name, p in params.items():
            got = p.grad if p.grad is not None else np.zeros_like(p.data)
            worst = max(worst, T.max_rel_err(got, fd[name]))
        return worst


def gradcheck_all(seed: int = 0, tol: float = 1e-4) -> list:
    results = []
    for variant in M.VARIANTS:
        err = gradcheck_variant(variant, seed)
        results.append((f"gradcheck[{variant}]", err <= tol,
                        f"max rel err {err:.3e} (tol {tol:.0e})"))
    return results


# ---------------------------------------------------------------------------
# oracle round trip on random trees

_LABELS = ("S", "NP", "VP", "PP")
_WORDS = ("the", "a", "dog", "cat", "runs", "sees", "near")


def random_tree(rng, max_depth: int = 4, max_children: int = 3) -> Tree:
    def node(depth):
        label = _LABELS[rng.integers(len(_LABELS))]
        children = []
        for _ in range(rng.integers(1, max_children + 1)):
            if depth >= max_depth or rng.random() < 0.6:
                children.append(_WORDS[rng.integers(len(_WORDS))])
            else:
                children.append(node(depth + 1))
        return Tree(label, tuple(children))
    return node(0)


def roundtrip_check(n: int = 300, seed: int = 0):
    rng = np.random.default_rng(seed)
    bad = sum(reconstruct(oracle(t)) != t
              for t in (random_tree(rng) for _ in range(n)))
    return ("oracle-roundtrip", bad == 0, f"{n - bad}/{n} trees round-trip")


# ---------------------------------------------------------------------------
# attention masks vs an independent backward bracket scan
#
# head_masks replays the forward parser; this oracle instead scans each
# prefix backwards, matching REDUCEs against NTs, so a shared bookkeeping
# bug cannot hide.

def _scan_mask_sets(actions):
    t = len(actions)
    depth = 0
    deepest_open = None
    for i in range(t - 1, 0, -1):
        kind = actions[i].kind
        if kind == "REDUCE":
            depth += 1
        elif kind == "NT":
            if depth == 0:
                deepest_open = i
                break
            depth -= 1
    if deepest_open is None:
        stack = {t - 1}
        outside = set(range(t - 1)) or {0}
    else:
        stack = set(range(deepest_open, t))
        outside = set(range(deepest_open))
    return stack, outside


def _random_prefix(rng, legality=DEFAULT_LEGALITY):
    state = apply(INITIAL_STATE, BOS, legality)
    actions = [BOS]
    for _ in range(int(rng.integers(1, 24))):
        kinds = sorted(legal_actions(state, legality))
        if not kinds:
            break
        kind = kinds[rng.integers(len(kinds))]
        if kind == "NT":
            action = nt(_LABELS[rng.integers(len(_LABELS))])
        elif kind == "GEN":
            action = gen(_WORDS[rng.integers(len(_WORDS))])
        else:
            action = REDUCE
        state = apply(state, action, legality)
        actions.append(action)
    return actions


def mask_check(n: int = 500, seed: int = 0):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        actions = _random_prefix(rng)
        rows = head_masks(actions)
        for i, row in enumerate(rows):
            stack, outside = _scan_mask_sets(actions[:i + 1])
            if (set(np.flatnonzero(row.stack_visible)) != stack
                    or set(np.flatnonzero(row.outside_visible)) != outside):
                bad += 1
                break
    return ("head-masks", bad == 0, f"{n - bad}/{n} prefixes match the scan")


# ---------------------------------------------------------------------------
# beam search vs exhaustive enumeration on a random tiny model

def _toy_joint_vocab() -> JointActionVocab:
    return JointActionVocab(TokenVocab(("<pad>", "<unk>", "<bos>", "a", "b")),
                            ("S",))


def beam_check(seed: int = 0, rel: float = 1e-9):
    vocab = _toy_joint_vocab()
    words = ["a", "b", "a"]
    exact = BeamConfig(action_beam=4096, word_beam=4096, fast_track=0)
    worst = 0.0
    total_ok = True
    for variant in M.PLM_VARIANTS:
        config = M.ModelConfig(vocab_size=len(vocab), variant=variant,
                               hidden_size=16, n_heads=4, n_layers=2,
                               ff_mult=2, max_len=8, dropout_p=0.0)
        params = M.init_params(config, seed)
        table = enumerate_joint(config, params, vocab, max_len=8)
        total_ok &= table.total() <= 1.0 + 1e-9
        want = enumerate_word_marginals(config, params, vocab, words)
        got = BeamSearch(config, params, vocab, exact).marginal_logprobs(words)
        worst = max(worst, float(np.max(np.abs(got - want) / np.abs(want))))
    ok = total_ok and worst <= rel
    return ("beam-exact", ok,
            f"max rel err {worst:.3e} (tol {rel:.0e}), mass bound "
            f"{'ok' if total_ok else 'VIOLATED'}")


def selftest(seed: int = 0) -> list:
    """Every oracle-backed check, one (name, ok, detail) per line."""
    results = [roundtrip_check(seed=seed), mask_check(seed=seed)]
    results.extend(gradcheck_all(seed))
    results.append(beam_check(seed))
    return results
