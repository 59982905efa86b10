"""Top-down generative transition system over constituency trees.

A sentence/tree pair corresponds to one action sequence:

    (S (NP The birds) (VP sang))
    -> BOS NT(S) NT(NP) GEN(The) GEN(birds) REDUCE NT(VP) GEN(sang) REDUCE REDUCE

BOS sits at index 0 of every in-memory sequence but is never written to
oracle files.  The same state machine drives oracle extraction, legality
checks during search, word-synchronous segmentation for the scaffold
models, and the two structure-guided attention masks (a "stack" head that
sees the contents of the deepest open constituent and an "outside" head
that sees everything before it).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .treebank import Tree

_SYMBOL = re.compile(r"[^()\s]+")


class TransitionError(ValueError):
    pass


class IllegalAction(TransitionError):
    """Action not permitted in the current parser state."""


class IncompleteSequence(TransitionError):
    """Sequence ended with open constituents or no completed root."""


class TrailingActions(TransitionError):
    """Actions continue after the root constituent closed."""


class BadActionString(TransitionError):
    """Unparseable action in an oracle file."""


@dataclass(frozen=True)
class Action:
    """One transition: kind in {"NT", "GEN", "REDUCE", "BOS"}.

    ``arg`` is the constituent label for NT, the surface token for GEN,
    and None otherwise.
    """

    kind: str
    arg: str | None = None

    def __post_init__(self):
        if self.kind in ("REDUCE", "BOS"):
            if self.arg is not None:
                raise ValueError(f"{self.kind} takes no argument")
        elif self.kind in ("NT", "GEN"):
            if self.arg is None or _SYMBOL.fullmatch(self.arg) is None:
                raise ValueError(f"bad {self.kind} argument: {self.arg!r}")
        else:
            raise ValueError(f"unknown action kind: {self.kind!r}")

    def __str__(self) -> str:
        if self.arg is None:
            return self.kind
        return f"{self.kind}({self.arg})"

    @staticmethod
    def from_string(text: str) -> "Action":
        if text == "REDUCE":
            return REDUCE
        if text == "BOS":
            return BOS
        m = re.fullmatch(r"(NT|GEN)\((.+)\)", text)
        if m is None:
            raise BadActionString(f"cannot parse action: {text!r}")
        try:
            return Action(m.group(1), m.group(2))
        except ValueError as exc:
            raise BadActionString(str(exc)) from None


def nt(label: str) -> Action:
    return Action("NT", label)


def gen(word: str) -> Action:
    return Action("GEN", word)


REDUCE = Action("REDUCE")
BOS = Action("BOS")

# An ActionSequence is a plain list of Action with BOS at index 0.
ActionSequence = list


@dataclass(frozen=True)
class LegalityConfig:
    """Search-time constraints that the transition system itself leaves open.

    max_open_constituents bounds NT nesting so beam search cannot spiral
    into unbounded stacks of empty constituents.
    """

    max_open_constituents: int = 32


DEFAULT_LEGALITY = LegalityConfig()


@dataclass(frozen=True)
class ParserState:
    """State after consuming ``position`` actions.

    open_stack holds (label, position-of-NT) pairs, innermost last.
    n_completed_roots is 0 or 1; once the root closes nothing is legal.
    """

    open_stack: tuple = ()
    n_completed_roots: int = 0
    position: int = 0


INITIAL_STATE = ParserState()


def legal_actions(state: ParserState, config: LegalityConfig = DEFAULT_LEGALITY) -> set:
    """Permitted action kinds, a subset of {"BOS", "NT", "GEN", "REDUCE"}.

    Rules: BOS only at position 0; the first real action opens the root
    (NT); GEN needs an open constituent; REDUCE needs a non-empty top
    constituent; after the root closes the set is empty; NT is barred at
    the max_open_constituents cap.
    """
    if state.position == 0:
        return {"BOS"}
    if state.n_completed_roots:
        return set()
    if state.position == 1:
        return {"NT"}
    # root not yet closed, so at least one constituent is open
    legal = {"GEN"}
    if len(state.open_stack) < config.max_open_constituents:
        legal.add("NT")
    top_position = state.open_stack[-1][1]
    if state.position > top_position + 1:  # top constituent has a child
        legal.add("REDUCE")
    return legal


def apply(state: ParserState, action: Action,
          config: LegalityConfig = DEFAULT_LEGALITY) -> ParserState:
    """Advance the state machine by one action.

    Raises IllegalAction if ``action.kind`` is not legal in ``state``.
    """
    if action.kind not in legal_actions(state, config):
        raise IllegalAction(f"{action} illegal at position {state.position} "
                            f"(open={[l for l, _ in state.open_stack]}, "
                            f"roots={state.n_completed_roots})")
    pos = state.position + 1
    if action.kind == "NT":
        return ParserState(state.open_stack + ((action.arg, state.position),),
                           0, pos)
    if action.kind == "REDUCE":
        remaining = state.open_stack[:-1]
        return ParserState(remaining, 0 if remaining else 1, pos)
    return ParserState(state.open_stack, 0, pos)  # GEN and BOS


def replay(actions, config: LegalityConfig = DEFAULT_LEGALITY) -> ParserState:
    """Fold ``apply`` over a prefix, validating legality as it goes."""
    state = INITIAL_STATE
    for action in actions:
        state = apply(state, action, config)
    return state


def oracle(tree: Tree) -> list:
    """Depth-first, left-to-right action sequence for ``tree``, BOS first."""
    actions = [BOS]

    def walk(node):
        actions.append(nt(node.label))
        for child in node.children:
            if isinstance(child, Tree):
                walk(child)
            else:
                actions.append(gen(child))
        actions.append(REDUCE)

    walk(tree)
    return actions


def reconstruct(actions) -> Tree:
    """Inverse of ``oracle``: rebuild the tree from a complete sequence.

    Raises:
        IllegalAction: the sequence violates legality (including closing an
            empty constituent).
        TrailingActions: actions continue after the root closes.
        IncompleteSequence: constituents remain open at the end.
    """
    state = INITIAL_STATE
    # children buffers, one per open constituent: (label, [children])
    stack = []
    root = None
    for action in actions:
        if state.n_completed_roots:
            raise TrailingActions(f"{action} after root closed")
        state = apply(state, action)
        if action.kind == "NT":
            stack.append((action.arg, []))
        elif action.kind == "GEN":
            stack[-1][1].append(action.arg)
        elif action.kind == "REDUCE":
            label, children = stack.pop()
            node = Tree(label, tuple(children))
            if stack:
                stack[-1][1].append(node)
            else:
                root = node
    if root is None:
        raise IncompleteSequence(f"{len(stack)} constituents still open")
    return root


@dataclass(frozen=True)
class SyncSegment:
    """A generated word plus the non-word actions immediately before it."""

    word: str
    preceding_ngram: tuple


def sync_ngrams(actions, config: LegalityConfig = DEFAULT_LEGALITY):
    """Segment a prefix-valid sequence word-synchronously.

    Returns (segments, trailing) where each segment pairs one GEN'd word
    with the maximal run of non-word actions preceding it, and trailing
    holds non-word actions after the last word.  Concatenating
    BOS + sum((seg.preceding_ngram, seg.word)) + trailing reproduces the
    input exactly.
    """
    replay(actions, config)  # validates, including BOS at index 0
    segments = []
    pending = []
    for action in actions[1:]:
        if action.kind == "GEN":
            segments.append(SyncSegment(action.arg, tuple(pending)))
            pending = []
        else:
            pending.append(action)
    return segments, pending


@dataclass(frozen=True, eq=False)
class HeadMaskRow:
    """Visibility over past positions 0..t-1 for one query position.

    stack_visible marks the contents of the deepest open constituent (the
    opening NT included); outside_visible marks everything before it.  The
    two cover all past positions; they overlap only in the degenerate
    first row, where both fall back to {0}.
    """

    stack_visible: np.ndarray
    outside_visible: np.ndarray


def mask_row(state: ParserState) -> HeadMaskRow:
    """Visibility row for the query that has consumed ``state.position`` actions."""
    t = state.position
    if t < 1:
        raise ValueError("mask row needs at least BOS consumed")
    stack = np.zeros(t, dtype=bool)
    outside = np.zeros(t, dtype=bool)
    if state.open_stack:
        p = state.open_stack[-1][1]
        stack[p:] = True
        outside[:p] = True  # p >= 1, so this is non-empty
    else:
        # before the first NT or after the root closed
        stack[t - 1] = True
        if t >= 2:
            outside[: t - 1] = True
        else:
            outside[0] = True  # degenerate first row: both heads see BOS
    return HeadMaskRow(stack, outside)


def head_masks(actions, config: LegalityConfig = DEFAULT_LEGALITY) -> list:
    """One HeadMaskRow per position of a prefix-valid sequence.

    Row i (arrays of length i+1) is derived from the parser state after
    consuming actions[0..i]; it governs attention at input position i.
    """
    state = INITIAL_STATE
    rows = []
    for action in actions:
        state = apply(state, action, config)
        rows.append(mask_row(state))
    return rows


def all_visible_masks(length: int) -> list:
    """Mask rows with every past position visible to both heads.

    With these, a parser-state-masked model must match its unmasked twin.
    """
    return [HeadMaskRow(np.ones(t, dtype=bool), np.ones(t, dtype=bool))
            for t in range(1, length + 1)]


def actions_to_line(actions) -> str:
    """Serialize one oracle (BOS dropped) as space-separated action strings."""
    if not actions or actions[0] != BOS:
        raise ValueError("action sequence must start with BOS")
    return " ".join(str(a) for a in actions[1:])


def line_to_actions(line: str) -> list:
    """Parse one oracle-file line back into a sequence with BOS prepended."""
    return [BOS] + [Action.from_string(tok) for tok in line.split()]


def write_oracle_file(sequences, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for actions in sequences:
            fh.write(actions_to_line(actions) + "\n")


def read_oracle_file(path) -> list:
    sequences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                sequences.append(line_to_actions(line))
            except TransitionError as exc:
                raise BadActionString(f"line {lineno}: {exc}") from None
    return sequences
