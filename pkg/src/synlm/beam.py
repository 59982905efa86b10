"""Word-synchronous beam search over joint action sequences.

Hypotheses are incremental parses scored by a frozen model via the
incremental decoder.  Each word step expands structural actions until
enough hypotheses have generated the next word; the top word-emitting
candidates of every round are fast-tracked past the structural
competition so structure cannot starve generation.  The log-sum-exp of
the surviving beam lower-bounds the true sentence marginal (it sums a
subset of parses).  Scores are natural-log throughout; surprisal
converts to bits at the boundary.
"""

import math
from dataclasses import dataclass

import numpy as np

from .model import (PLM_MASK, PLM_VARIANTS, IncrementalDecoder,
                    VariantMismatch, word_logprobs)
from .transitions import (BOS, DEFAULT_LEGALITY, INITIAL_STATE, REDUCE,
                          apply, gen, legal_actions, mask_row, nt,
                          reconstruct)
from .vocab import BOS_ID


class BeamError(RuntimeError):
    pass


class BeamExhausted(BeamError):
    """No hypothesis can legally generate the required word."""


@dataclass(frozen=True)
class BeamConfig:
    """Search widths.  fast_track <= word_beam <= action_beam."""

    action_beam: int = 100
    word_beam: int = 10
    fast_track: int = 5
    max_struct_per_word: int = 16

    def __post_init__(self):
        if not 0 <= self.fast_track <= self.word_beam <= self.action_beam:
            raise ValueError(f"need fast_track <= word_beam <= action_beam, "
                             f"got {self.fast_track}/{self.word_beam}/{self.action_beam}")
        if self.word_beam < 1 or self.max_struct_per_word < 1:
            raise ValueError("beam widths must be positive")

    def to_dict(self) -> dict:
        return {"action_beam": self.action_beam, "word_beam": self.word_beam,
                "fast_track": self.fast_track,
                "max_struct_per_word": self.max_struct_per_word}


class Hypothesis:
    """One incremental parse.

    logp accumulates per-step log-probabilities as python floats, so two
    hypotheses with the same actions agree bit for bit regardless of the
    order the beam discovered them.  next_logprobs caches the model's
    distribution over the next action so candidate scoring never touches
    the decoder.
    """

    __slots__ = ("ids", "actions", "state", "decoder_state", "logp",
                 "next_logprobs")

    def __init__(self, ids, actions, state, decoder_state, logp, next_logprobs):
        self.ids = ids                  # tuple of action ids, BOS first
        self.actions = actions          # tuple of Action
        self.state = state              # ParserState
        self.decoder_state = decoder_state
        self.logp = logp
        self.next_logprobs = next_logprobs

    @property
    def n_words(self) -> int:
        return sum(1 for a in self.actions if a.kind == "GEN")


# Candidates are (score, id-tuple, parent, action_id, action); they are
# scored from the parent's cached next_logprobs and only materialized
# (decoder step, parser state advance) if they survive pruning.

def _cand_key(cand):
    # highest score first; exact ties broken lexicographically on action
    # ids so results never depend on expansion order
    return (-cand[0], cand[1])


def logsumexp(values) -> float:
    m = max(values)
    return m + math.log(sum(math.exp(v - m) for v in values))


def beam_marginal(beam) -> float:
    """log sum of the joint probabilities carried by a beam."""
    return logsumexp([h.logp for h in beam])


class BeamSearch:
    """Word-synchronous search over a frozen joint-action model."""

    def __init__(self, config, params, joint_vocab, beam_config=None,
                 legality=DEFAULT_LEGALITY):
        if config.variant not in PLM_VARIANTS:
            raise VariantMismatch(
                f"beam search needs a joint-action model, got {config.variant}")
        self.config = config
        self.vocab = joint_vocab
        self.beam_config = beam_config if beam_config is not None else BeamConfig()
        self.legality = legality
        self.decoder = IncrementalDecoder(config, params)
        self.masked = config.variant == PLM_MASK
        self._nt_choices = [(joint_vocab.encode(nt(label)), nt(label))
                            for label in joint_vocab.nt_labels]
        self._reduce_id = joint_vocab.reduce_id

    def _materialize(self, parent, action_id, action, score) -> Hypothesis:
        state = apply(parent.state, action, self.legality)
        row = mask_row(state) if self.masked else None
        decoder_state, logprobs = self.decoder.step(
            parent.decoder_state, action_id, row)
        return Hypothesis(parent.ids + (action_id,),
                          parent.actions + (action,),
                          state, decoder_state, score, logprobs)

    def initial_beam(self) -> list:
        state = apply(INITIAL_STATE, BOS, self.legality)
        row = mask_row(state) if self.masked else None
        decoder_state, logprobs = self.decoder.step(
            self.decoder.start(), BOS_ID, row)
        return [Hypothesis((BOS_ID,), (BOS,), state, decoder_state, 0.0,
                           logprobs)]

    def _cand(self, hyp, action_id, action):
        score = hyp.logp + float(hyp.next_logprobs[action_id])
        return (score, hyp.ids + (action_id,), hyp, action_id, action)

    def word_sync_step(self, beam, next_word: str) -> list:
        """Advance every hypothesis through GEN(next_word).

        Returns the top word_beam hypotheses that emitted the word,
        sorted best first.  Raises BeamExhausted if none can.
        """
        cfg = self.beam_config
        word_id = self.vocab.tokens.encode(next_word)
        gen_action = gen(next_word)
        frontier = list(beam)
        synced = []
        rounds = 0
        while frontier and rounds < cfg.max_struct_per_word:
            # stop once no frontier descendant can still reach the top
            # word_beam: scores only decrease along a hypothesis, so the
            # returned beam equals exhausting the frontier outright
            if len(synced) >= cfg.word_beam:
                kth_best = sorted(c[0] for c in synced)[-cfg.word_beam]
                if max(h.logp for h in frontier) < kth_best:
                    break
            rounds += 1
            word_cands, struct_cands = [], []
            for hyp in frontier:
                if hyp.decoder_state.length >= self.config.max_len:
                    continue  # cannot extend further
                kinds = legal_actions(hyp.state, self.legality)
                if "GEN" in kinds:
                    word_cands.append(self._cand(hyp, word_id, gen_action))
                if "REDUCE" in kinds:
                    struct_cands.append(self._cand(hyp, self._reduce_id, REDUCE))
                if "NT" in kinds:
                    for action_id, action in self._nt_choices:
                        struct_cands.append(self._cand(hyp, action_id, action))
            word_cands.sort(key=_cand_key)
            synced.extend(word_cands[:cfg.fast_track])
            pool = word_cands[cfg.fast_track:] + struct_cands
            pool.sort(key=_cand_key)
            next_frontier = []
            for cand in pool[:cfg.action_beam]:
                if cand[4].kind == "GEN":
                    synced.append(cand)
                else:
                    next_frontier.append(cand)
            frontier = [self._materialize(c[2], c[3], c[4], c[0])
                        for c in next_frontier]
        if not synced:
            raise BeamExhausted(f"no hypothesis can generate {next_word!r}")
        synced.sort(key=_cand_key)
        return [self._materialize(c[2], c[3], c[4], c[0])
                for c in synced[:cfg.word_beam]]

    def marginal_logprobs(self, words) -> np.ndarray:
        """log sum-over-beam p(w_<=t, y) after each word, length len(words)."""
        if not words:
            raise ValueError("empty word list")
        beam = self.initial_beam()
        out = []
        for word in words:
            beam = self.word_sync_step(beam, word)
            out.append(beam_marginal(beam))
        return np.array(out)

    def parse(self, words):
        """Best-scoring tree over the words.

        After the word-synchronous pass a closure beam expands the
        remaining structural actions until the root completes.  Room
        before max_len gates the candidates: opening a constituent costs
        its own slot plus a later REDUCE.
        """
        if not words:
            raise ValueError("empty word list")
        beam = self.initial_beam()
        for word in words:
            beam = self.word_sync_step(beam, word)
        cfg = self.beam_config
        best = None                     # (score, ids, hypothesis), root closed
        frontier = list(beam)
        while frontier:
            # scores only fall along a hypothesis, so once the closed best
            # beats the whole frontier no descendant can overtake it
            if best is not None and max(h.logp for h in frontier) < best[0]:
                break
            cands = []
            for hyp in frontier:
                kinds = legal_actions(hyp.state, self.legality)
                room = self.config.max_len - hyp.state.position
                depth = len(hyp.state.open_stack)
                if room < depth:
                    continue
                if "REDUCE" in kinds:
                    cands.append(self._cand(hyp, self._reduce_id, REDUCE))
                if "NT" in kinds and room >= depth + 2:
                    cands.extend(self._cand(hyp, aid, act)
                                 for aid, act in self._nt_choices)
            cands.sort(key=_cand_key)
            frontier = []
            for score, ids, parent, aid, act in cands[:cfg.action_beam]:
                child = self._materialize(parent, aid, act, score)
                if child.state.n_completed_roots:
                    if best is None or (-score, ids) < (-best[0], best[1]):
                        best = (score, ids, child)
                else:
                    frontier.append(child)
        if best is None:
            raise BeamExhausted("no beam hypothesis closes within the "
                                "model's max length")
        return reconstruct(list(best[2].actions))


# ---------------------------------------------------------------------------
# variant dispatch: joint models marginalize with the beam, word-level
# models score sentences exactly with a single forward

def marginal_logprob(config, params, vocabs, words, beam_config=None,
                     legality=DEFAULT_LEGALITY) -> np.ndarray:
    """Per-prefix log p(w_<=t), one entry per word."""
    if config.variant in PLM_VARIANTS:
        searcher = BeamSearch(config, params, vocabs["joint"], beam_config,
                              legality)
        return searcher.marginal_logprobs(words)
    if not words:
        raise ValueError("empty word list")
    lps = word_logprobs(config, params, words, vocabs["tokens"])
    return np.cumsum(lps.astype(np.float64))


def surprisal(config, params, vocabs, prefix, continuation, beam_config=None,
              legality=DEFAULT_LEGALITY) -> float:
    """-log2 p(continuation | prefix), by one pass over the full string."""
    if not continuation:
        raise ValueError("empty continuation")
    words = list(prefix) + list(continuation)
    lps = marginal_logprob(config, params, vocabs, words, beam_config,
                           legality)
    lp_prefix = float(lps[len(prefix) - 1]) if prefix else 0.0
    return -(float(lps[-1]) - lp_prefix) / math.log(2.0)


def parse(config, params, vocabs, words, beam_config=None,
          legality=DEFAULT_LEGALITY):
    """Highest-scoring tree for a sentence under a joint-action model."""
    searcher = BeamSearch(config, params, vocabs["joint"], beam_config,
                          legality)
    return searcher.parse(words)
