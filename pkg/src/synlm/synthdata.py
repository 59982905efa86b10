"""Deterministic toy grammars and exhaustive enumeration oracles.

A ToyPCFG samples labeled trees for synthetic corpora; the fixed
agreement grammar embeds subject-verb number agreement with optional
prepositional attractors, so a model must track the head noun across
intervening material.  The enumerators walk every legal action sequence
of a tiny model and are the ground truth the beam search is tested
against.
"""

import math
from dataclasses import dataclass

import numpy as np

from .model import PLM_MASK, PLM_VARIANTS, IncrementalDecoder, VariantMismatch
from .transitions import (BOS, DEFAULT_LEGALITY, INITIAL_STATE, apply,
                          legal_actions, mask_row)
from .treebank import Tree, tree_yield
from .vocab import BOS_ID


class SynthError(ValueError):
    pass


class ImproperGrammar(SynthError):
    """Sampling keeps blowing through the depth cap; derivations do not
    terminate with usable probability."""


class TooLarge(SynthError):
    """Enumeration requested beyond the hard tractability caps."""


_MAX_REJECTS = 100  # consecutive depth-cap rejections tolerated per tree


@dataclass(frozen=True)
class ToyPCFG:
    """rules: tuple of (lhs, rhs tuple, probability); rhs symbols that
    appear as an lhs are nonterminals, everything else is a word."""

    rules: tuple
    start: str
    seed: int = 0

    def __post_init__(self):
        by_lhs = {}
        for lhs, rhs, prob in self.rules:
            if not rhs:
                raise SynthError(f"empty expansion for {lhs!r}")
            by_lhs.setdefault(lhs, []).append((tuple(rhs), float(prob)))
        for lhs, options in by_lhs.items():
            total = sum(p for _, p in options)
            if abs(total - 1.0) > 1e-9:
                raise SynthError(f"probabilities for {lhs!r} sum to {total!r}")
        if self.start not in by_lhs:
            raise SynthError(f"start symbol {self.start!r} has no rules")
        object.__setattr__(self, "_by_lhs", by_lhs)

    def expansions(self, label):
        return self._by_lhs[label]

    @property
    def nonterminals(self) -> set:
        return set(self._by_lhs)


class _TooDeep(Exception):
    pass


def _sample_tree(grammar: ToyPCFG, label: str, rng, depth: int,
                 depth_cap: int) -> Tree:
    if depth > depth_cap:
        raise _TooDeep
    r = rng.random()
    acc = 0.0
    options = grammar.expansions(label)
    rhs = options[-1][0]
    for cand, prob in options:
        acc += prob
        if r < acc:
            rhs = cand
            break
    children = tuple(
        _sample_tree(grammar, sym, rng, depth + 1, depth_cap)
        if sym in grammar.nonterminals else sym
        for sym in rhs)
    return Tree(label, children)


def sample_corpus(grammar: ToyPCFG, n: int, seed=None,
                  depth_cap: int = 25) -> list:
    """n i.i.d. trees, deterministic given the grammar's (or given) seed.

    Derivations deeper than depth_cap are rejected and redrawn; a run of
    _MAX_REJECTS straight rejections means the grammar effectively never
    terminates and raises ImproperGrammar.
    """
    rng = np.random.default_rng(grammar.seed if seed is None else seed)
    trees = []
    while len(trees) < n:
        for attempt in range(_MAX_REJECTS + 1):
            try:
                trees.append(_sample_tree(grammar, grammar.start, rng, 0,
                                          depth_cap))
                break
            except _TooDeep:
                continue
        else:
            raise ImproperGrammar(
                f"{_MAX_REJECTS} straight rejections at depth {depth_cap}")
    return trees


# ---------------------------------------------------------------------------
# fixed agreement grammar
#
# S        -> NP-SG VP-SG | NP-PL VP-PL            (number must match)
# NP-x     -> the NOUN-x  | the NOUN-x PP          (PP hides an attractor)
# PP       -> P NP-SG | P NP-PL
# VP-x     -> VERB-x
#
# Word classes are expanded inline so the joint action vocabulary stays
# small: nouns {dog,cat,bird}+s, verbs {sleeps,sings,runs}/{sleep,sing,
# run}, prepositions {near,by}.

_SG_NOUNS = ("dog", "cat", "bird")
_PL_NOUNS = ("dogs", "cats", "birds")
_SG_VERBS = ("sleeps", "sings", "runs")
_PL_VERBS = ("sleep", "sing", "run")
_PREPS = ("near", "by")

SWAP_VERB = dict(zip(_SG_VERBS, _PL_VERBS)) | dict(zip(_PL_VERBS, _SG_VERBS))


def _np_rules(label, nouns):
    rules = []
    for noun in nouns:
        rules.append((label, ("the", noun), 0.55 / len(nouns)))
        rules.append((label, ("the", noun, "PP"), 0.45 / len(nouns)))
    return rules


def agreement_grammar(seed: int = 0) -> ToyPCFG:
    rules = [("S", ("NP-SG", "VP-SG"), 0.5),
             ("S", ("NP-PL", "VP-PL"), 0.5)]
    rules += _np_rules("NP-SG", _SG_NOUNS)
    rules += _np_rules("NP-PL", _PL_NOUNS)
    for prep in _PREPS:
        rules.append(("PP", (prep, "NP-SG"), 0.5 / len(_PREPS)))
        rules.append(("PP", (prep, "NP-PL"), 0.5 / len(_PREPS)))
    for verb in _SG_VERBS:
        rules.append(("VP-SG", (verb,), 1.0 / len(_SG_VERBS)))
    for verb in _PL_VERBS:
        rules.append(("VP-PL", (verb,), 1.0 / len(_PL_VERBS)))
    return ToyPCFG(tuple(rules), "S", seed)


def _main_verb_flipped(tree: Tree):
    """Words of the sentence and of its agreement-violating twin.

    The twin flips only the main verb's number, so the pair differs in
    exactly one token.
    """
    words = list(tree_yield(tree))
    verb = tree.children[-1].children[0]  # VP holds the single main verb
    bad = list(words)
    bad[-1] = SWAP_VERB[verb]
    return words, bad


def agreement_pairs(n: int, seed: int, exclude=()) -> list:
    """n minimal pairs in the evaluation schema, balanced between
    singular and plural main subjects.  Sentences whose space-joined
    form is in ``exclude`` are redrawn (held-out guarantee)."""
    if n % 2:
        raise SynthError("a balanced pair set needs an even n")
    grammar = agreement_grammar(seed)
    rng = np.random.default_rng(seed)
    exclude = set(exclude)
    seen = set()
    per_bucket = n // 2
    buckets = {"NP-SG": [], "NP-PL": []}
    attempts = 0
    while any(len(b) < per_bucket for b in buckets.values()):
        attempts += 1
        if attempts > 1000 * n:
            raise ImproperGrammar("cannot fill balanced pair buckets")
        tree = sample_corpus(grammar, 1, seed=rng.integers(2 ** 63))[0]
        subject = tree.children[0].label
        if len(buckets[subject]) >= per_bucket:
            continue
        words, bad = _main_verb_flipped(tree)
        key = " ".join(words)
        if key in exclude or key in seen:
            continue
        seen.add(key)
        buckets[subject].append((words, bad))
    pairs = []
    for i in range(per_bucket):  # interleave so any prefix stays balanced
        for subject in ("NP-SG", "NP-PL"):
            words, bad = buckets[subject][i]
            pairs.append({"pair_id": f"agree-{len(pairs):04d}",
                          "grammatical": words, "ungrammatical": bad})
    return pairs


# ---------------------------------------------------------------------------
# exhaustive enumeration over a model's joint action space

_MAX_VOCAB = 8
_MAX_LEN = 10


@dataclass
class JointEnumeration:
    """entries: (action tuple, probability) for every complete legal
    sequence of length <= max_len; leftover is the probability mass of
    prefixes still alive at max_len."""

    entries: list
    leftover: float

    def total(self) -> float:
        return sum(p for _, p in self.entries) + self.leftover


def _decoder_for(config, params, joint_vocab):
    if config.variant not in PLM_VARIANTS:
        raise VariantMismatch(
            f"enumeration needs a joint-action model, got {config.variant}")
    if len(joint_vocab) > _MAX_VOCAB:
        raise TooLarge(f"joint vocabulary of {len(joint_vocab)} exceeds "
                       f"{_MAX_VOCAB} symbols")
    return IncrementalDecoder(config, params)


def _stepper(decoder, masked, legality):
    """One decoder step per tree edge, with parser and cache in lockstep."""
    def step(state, decoder_state, action, ident):
        child = apply(state, action, legality)
        row = mask_row(child) if masked else None
        child_dec, next_lps = decoder.step(decoder_state, ident, row)
        return child, child_dec, next_lps
    return step


def enumerate_joint(config, params, joint_vocab, max_len: int,
                    legality=DEFAULT_LEGALITY) -> JointEnumeration:
    """Every complete legal action sequence with its model probability.

    Expansion is purely legality-driven over the whole id space, so the
    reserved word forms enumerate like ordinary words.  complete +
    leftover can only undershoot 1: whatever the unconstrained softmax
    puts on illegal actions is dropped, never redistributed.
    Hard-capped to tiny instances.
    """
    decoder = _decoder_for(config, params, joint_vocab)
    if max_len > _MAX_LEN:
        raise TooLarge(f"max_len {max_len} exceeds {_MAX_LEN}")
    max_len = min(max_len, config.max_len)
    step = _stepper(decoder, config.variant == PLM_MASK, legality)
    actions = [joint_vocab.decode(i) for i in range(len(joint_vocab))]
    entries = []
    leftover = 0.0
    prefix = []

    def walk(state, decoder_state, next_lps, logp):
        nonlocal leftover
        kinds = legal_actions(state, legality)
        for ident, action in enumerate(actions):
            if action.kind not in kinds:
                continue
            lp = logp + float(next_lps[ident])
            child = apply(state, action, legality)
            prefix.append(action)
            if child.n_completed_roots:
                entries.append((tuple(prefix), math.exp(lp)))
            elif child.position >= max_len:
                leftover += math.exp(lp)
            else:
                child, child_dec, child_lps = step(state, decoder_state,
                                                   action, ident)
                walk(child, child_dec, child_lps, lp)
            prefix.pop()

    state, dec, lps = step(INITIAL_STATE, decoder.start(), BOS, BOS_ID)
    prefix.append(BOS)
    if state.position >= max_len:
        leftover = 1.0
    else:
        walk(state, dec, lps, 0.0)
    return JointEnumeration(entries, leftover)


def enumerate_word_marginals(config, params, joint_vocab, words,
                             legality=DEFAULT_LEGALITY) -> np.ndarray:
    """Exact log p(w_<=t) by summing every legal structural interleaving.

    Entry t sums the joint probability of every prefix that ends exactly
    at GEN(words[t]); this is the quantity the beam approximates.
    """
    decoder = _decoder_for(config, params, joint_vocab)
    if not words:
        raise ValueError("empty word list")
    step = _stepper(decoder, config.variant == PLM_MASK, legality)
    gen_actions = [(joint_vocab.tokens.encode(w), joint_vocab.decode(
        joint_vocab.tokens.encode(w))) for w in words]
    struct = ([(joint_vocab.reduce_id, joint_vocab.decode(joint_vocab.reduce_id))]
              + [(i, joint_vocab.decode(i)) for i in joint_vocab.nt_ids])
    mass = [0.0] * len(words)

    def walk(state, decoder_state, next_lps, logp, t):
        kinds = legal_actions(state, legality)
        if "GEN" in kinds:
            ident, action = gen_actions[t]
            lp = logp + float(next_lps[ident])
            mass[t] += math.exp(lp)
            if t + 1 < len(words) and state.position + 1 < config.max_len:
                child, child_dec, child_lps = step(state, decoder_state,
                                                   action, ident)
                walk(child, child_dec, child_lps, lp, t + 1)
        for ident, action in struct:
            if action.kind not in kinds or state.position + 1 >= config.max_len:
                continue
            child, child_dec, child_lps = step(state, decoder_state,
                                               action, ident)
            walk(child, child_dec, child_lps, logp + float(next_lps[ident]), t)

    state, dec, lps = step(INITIAL_STATE, decoder.start(), BOS, BOS_ID)
    walk(state, dec, lps, 0.0, 0)
    if any(m <= 0.0 for m in mass):
        raise ValueError("no legal derivation reaches every word")
    return np.array([math.log(m) for m in mass])
