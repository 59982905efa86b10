"""Token, joint-action, and action-ngram vocabularies.

All three share the same file format, one entry per line::

    id<TAB>surface-form

and reload bit-exactly.  Reserved slots are fixed: the token vocabulary
holds <pad>=0, <unk>=1, <bos>=2; the ngram vocabulary holds <pad>=0 and
<blank>=1 (the empty ngram).  The joint action vocabulary extends the
token vocabulary with one id for REDUCE and one per nonterminal label, so
word ids coincide in both and GEN(w) needs no separate namespace.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter

import numpy as np

from .transitions import Action, BOS, REDUCE, gen, nt, sync_ngrams
from .treebank import nonterminal_labels, tree_yield

log = logging.getLogger(__name__)

PAD_ID, UNK_ID, BOS_ID = 0, 1, 2
PAD, UNK, BOS_FORM = "<pad>", "<unk>", "<bos>"
RESERVED_TOKENS = (PAD, UNK, BOS_FORM)

NGRAM_PAD_ID, NGRAM_BLANK_ID = 0, 1
NGRAM_BLANK = "<blank>"


class VocabError(ValueError):
    pass


class EmptyCorpus(VocabError):
    pass


class UnknownLabel(VocabError):
    """NT label absent from the joint vocabulary (labels are closed-class)."""


def _serialize(forms) -> bytes:
    return "".join(f"{i}\t{form}\n" for i, form in enumerate(forms)).encode("utf-8")


def _load_forms(path) -> list:
    forms = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            ident, _, form = line.partition("\t")
            if int(ident) != lineno or not form:
                raise VocabError(f"{path}: bad vocabulary line {lineno}: {line!r}")
            forms.append(form)
    if not forms:
        raise VocabError(f"{path}: empty vocabulary file")
    return forms


class TokenVocab:
    """Word-level vocabulary with UNK fallback; ids fixed at build time."""

    def __init__(self, forms):
        forms = tuple(forms)
        if forms[:3] != RESERVED_TOKENS:
            raise VocabError(f"token vocabulary must start with {RESERVED_TOKENS}")
        if len(set(forms)) != len(forms):
            raise VocabError("duplicate token forms")
        self.forms = forms
        self._ids = {form: i for i, form in enumerate(forms)}

    def __len__(self):
        return len(self.forms)

    def __contains__(self, token):
        return token in self._ids

    def __eq__(self, other):
        return isinstance(other, TokenVocab) and self.forms == other.forms

    def encode(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def decode(self, ident: int) -> str:
        return self.forms[ident]

    def encode_words(self, words) -> np.ndarray:
        return np.array([BOS_ID] + [self.encode(w) for w in words], dtype=np.int64)

    def serialize(self) -> bytes:
        return _serialize(self.forms)

    def digest(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.serialize())

    @classmethod
    def load(cls, path) -> "TokenVocab":
        return cls(_load_forms(path))


def build_token_vocab(trees, min_count: int = 1) -> TokenVocab:
    """Count words over tree yields; keep those with count >= min_count.

    Order: frequency descending, ties lexicographic.  Deterministic.
    """
    counts = Counter()
    for tree in trees:
        counts.update(tree_yield(tree))
    if not counts:
        raise EmptyCorpus("no tokens in corpus")
    kept = [tok for tok, c in counts.items()
            if c >= min_count and tok not in RESERVED_TOKENS]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return TokenVocab(RESERVED_TOKENS + tuple(kept))


class JointActionVocab:
    """Token ids, then REDUCE, then NT(label) ids in lexicographic order."""

    def __init__(self, tokens: TokenVocab, nt_labels):
        self.tokens = tokens
        self.nt_labels = tuple(sorted(nt_labels))
        if len(set(self.nt_labels)) != len(self.nt_labels):
            raise VocabError("duplicate nonterminal labels")
        self.reduce_id = len(tokens)
        self._nt_ids = {label: self.reduce_id + 1 + i
                        for i, label in enumerate(self.nt_labels)}

    def __len__(self):
        return len(self.tokens) + 1 + len(self.nt_labels)

    def __eq__(self, other):
        return (isinstance(other, JointActionVocab)
                and self.tokens == other.tokens
                and self.nt_labels == other.nt_labels)

    @property
    def nt_ids(self) -> list:
        return list(self._nt_ids.values())

    def is_word(self, ident: int) -> bool:
        return ident < len(self.tokens)

    def encode(self, action: Action) -> int:
        if action.kind == "GEN":
            return self.tokens.encode(action.arg)
        if action.kind == "BOS":
            return BOS_ID
        if action.kind == "REDUCE":
            return self.reduce_id
        try:
            return self._nt_ids[action.arg]
        except KeyError:
            raise UnknownLabel(f"nonterminal label not in vocabulary: {action.arg!r}") from None

    def decode(self, ident: int) -> Action:
        if ident == BOS_ID:
            return BOS
        if ident == self.reduce_id:
            return REDUCE
        if ident < len(self.tokens):
            return gen(self.tokens.decode(ident))
        return nt(self.nt_labels[ident - self.reduce_id - 1])

    def encode_sequence(self, actions) -> np.ndarray:
        return np.array([self.encode(a) for a in actions], dtype=np.int64)

    @property
    def forms(self) -> tuple:
        word_forms = RESERVED_TOKENS + tuple(
            f"GEN({w})" for w in self.tokens.forms[3:])
        return word_forms + ("REDUCE",) + tuple(f"NT({l})" for l in self.nt_labels)

    def serialize(self) -> bytes:
        return _serialize(self.forms)

    def digest(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.serialize())

    @classmethod
    def from_forms(cls, forms) -> "JointActionVocab":
        tokens, labels = [], []
        for form in forms:
            if form == "REDUCE":
                continue
            if form.startswith("NT(") and form.endswith(")"):
                labels.append(form[3:-1])
            elif form.startswith("GEN(") and form.endswith(")"):
                tokens.append(form[4:-1])
            else:
                tokens.append(form)  # reserved forms
        vocab = cls(TokenVocab(tokens), labels)
        if vocab.forms != tuple(forms):
            raise VocabError("joint vocabulary file is not in canonical order")
        return vocab

    @classmethod
    def load(cls, path) -> "JointActionVocab":
        return cls.from_forms(_load_forms(path))


def build_joint_vocab(token_vocab: TokenVocab, trees) -> JointActionVocab:
    labels = set()
    for tree in trees:
        labels |= nonterminal_labels(tree)
    if not labels:
        raise EmptyCorpus("no trees in corpus")
    return JointActionVocab(token_vocab, labels)


class NGramVocab:
    """Atomic action-ngram types for the scaffold head.

    Forms are space-joined action strings ("NT(S) NT(NP)").  The empty
    ngram is <blank>; ngrams unseen at fit time also map to <blank> with a
    warning (they can only appear in dev/eval monitoring).
    """

    def __init__(self, forms):
        forms = tuple(forms)
        if forms[:2] != (PAD, NGRAM_BLANK):
            raise VocabError(f"ngram vocabulary must start with {(PAD, NGRAM_BLANK)}")
        if len(set(forms)) != len(forms):
            raise VocabError("duplicate ngram forms")
        self.forms = forms
        self._ids = {form: i for i, form in enumerate(forms)}
        self._warned = set()

    def __len__(self):
        return len(self.forms)

    def __eq__(self, other):
        return isinstance(other, NGramVocab) and self.forms == other.forms

    def encode(self, ngram) -> int:
        if len(ngram) == 0:
            return NGRAM_BLANK_ID
        form = " ".join(str(a) for a in ngram)
        ident = self._ids.get(form)
        if ident is None:
            if form not in self._warned:
                self._warned.add(form)
                log.warning("ngram not in vocabulary, using <blank>: %s", form)
            return NGRAM_BLANK_ID
        return ident

    def decode(self, ident: int) -> tuple:
        form = self.forms[ident]
        if form in (PAD, NGRAM_BLANK):
            return ()
        return tuple(Action.from_string(tok) for tok in form.split())

    def serialize(self) -> bytes:
        return _serialize(self.forms)

    def digest(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.serialize())

    @classmethod
    def load(cls, path) -> "NGramVocab":
        return cls(_load_forms(path))


def build_ngram_vocab(oracles) -> NGramVocab:
    """One entry per distinct non-empty preceding_ngram across all oracles."""
    counts = Counter()
    for actions in oracles:
        segments, _ = sync_ngrams(actions)
        for seg in segments:
            if seg.preceding_ngram:
                counts[" ".join(str(a) for a in seg.preceding_ngram)] += 1
    kept = sorted(counts, key=lambda form: (-counts[form], form))
    return NGramVocab((PAD, NGRAM_BLANK) + tuple(kept))
