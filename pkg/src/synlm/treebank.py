"""Bracketed constituency trees and line-delimited corpora.

A tree is written in the usual single-line bracketed form::

    (S (NP The birds) (VP sang))

Labels and terminals are arbitrary non-empty strings without parentheses or
whitespace.  Rendering is canonical: single spaces between items, no
indentation, so ``render_tree(parse_tree(s)) == s`` for canonical ``s`` and
``parse_tree(render_tree(t)) == t`` for every tree ``t``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass


class TreebankError(ValueError):
    """Base class for malformed bracketed input."""


class UnbalancedBrackets(TreebankError):
    """Brackets do not nest properly, or there is trailing/missing input."""


class EmptyConstituent(TreebankError):
    """A constituent has a label but no children, e.g. ``(S)``."""


class BadLabel(TreebankError):
    """A constituent label is missing or malformed."""


_LEXER = re.compile(r"\(|\)|[^()\s]+")


@dataclass(frozen=True)
class Tree:
    """A constituent with a label and at least one child.

    Children are either ``Tree`` instances or plain strings (terminals).
    """

    label: str
    children: tuple

    def __post_init__(self):
        if not self.label or _LEXER.fullmatch(self.label) is None or self.label in "()":
            raise BadLabel(f"bad constituent label: {self.label!r}")
        if len(self.children) == 0:
            raise EmptyConstituent(f"constituent {self.label!r} has no children")
        for child in self.children:
            if isinstance(child, str):
                if not child or _LEXER.fullmatch(child) is None or child in "()":
                    raise BadLabel(f"bad terminal: {child!r}")
            elif not isinstance(child, Tree):
                raise TypeError(f"child must be Tree or str, got {type(child)}")


def parse_tree(text: str) -> Tree:
    """Parse a single bracketed tree from ``text``.

    Raises:
        UnbalancedBrackets: brackets do not balance, or extra input follows
            the root constituent.
        BadLabel: a ``(`` is not followed by a label token.
        EmptyConstituent: a constituent closes with no children.
    """
    tokens = _LEXER.findall(text)
    pos = 0
    n = len(tokens)

    def parse_node() -> Tree:
        nonlocal pos
        if pos >= n or tokens[pos] != "(":
            raise UnbalancedBrackets("expected '('")
        pos += 1
        if pos >= n or tokens[pos] in ("(", ")"):
            raise BadLabel("constituent is missing a label")
        label = tokens[pos]
        pos += 1
        children = []
        while True:
            if pos >= n:
                raise UnbalancedBrackets("unexpected end of input inside constituent")
            tok = tokens[pos]
            if tok == ")":
                pos += 1
                break
            if tok == "(":
                children.append(parse_node())
            else:
                children.append(tok)
                pos += 1
        if not children:
            raise EmptyConstituent(f"constituent {label!r} has no children")
        return Tree(label, tuple(children))

    root = parse_node()
    if pos != n:
        raise UnbalancedBrackets(f"trailing input after root constituent: {tokens[pos]!r}")
    return root


def render_tree(tree: Tree) -> str:
    """Render ``tree`` in canonical single-space bracketed form."""
    parts = []
    for child in tree.children:
        parts.append(render_tree(child) if isinstance(child, Tree) else child)
    return "(" + tree.label + " " + " ".join(parts) + ")"


def tree_yield(tree: Tree) -> list[str]:
    """Terminal words of ``tree``, left to right."""
    words = []
    for child in tree.children:
        if isinstance(child, Tree):
            words.extend(tree_yield(child))
        else:
            words.append(child)
    return words


def nonterminal_labels(tree: Tree) -> set[str]:
    """All constituent labels used in ``tree``."""
    labels = {tree.label}
    for child in tree.children:
        if isinstance(child, Tree):
            labels |= nonterminal_labels(child)
    return labels


def read_corpus(path) -> list[Tree]:
    """Read a UTF-8 file with one bracketed tree per line.

    Blank lines are skipped.  Parse errors are re-raised with the offending
    line number prepended to the message.
    """
    trees = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                trees.append(parse_tree(line))
            except TreebankError as exc:
                raise type(exc)(f"line {lineno}: {exc}") from None
    return trees


def write_corpus(trees, path) -> None:
    """Write trees one per line in canonical form."""
    with open(path, "w", encoding="utf-8") as fh:
        for tree in trees:
            fh.write(render_tree(tree) + "\n")
