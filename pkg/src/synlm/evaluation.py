"""Targeted syntactic evaluation and perplexity.

File formats (one JSON object per line):

Suite item::

    {"item_id": "subj-1",
     "variants": {"gram":   [["prefix", ["the", "dog"]], ["verb", ["runs"]]],
                  "ungram": [["prefix", ["the", "dog"]], ["verb", ["run"]]]},
     "conditions": [{"left":  [["gram", "verb"]],
                     "right": [["ungram", "verb"]]}]}

A variant is an ordered list of named regions whose concatenation is the
sentence, so regions are contiguous, disjoint, and ordered by
construction.  A condition asserts that the summed region surprisals on
the left are strictly smaller than those on the right; an item passes
iff every condition holds.

Minimal pair::

    {"pair_id": "agree-0001",
     "grammatical": ["the", "dog", "runs"],
     "ungrammatical": ["the", "dog", "run"]}

A pair is correct iff the full-sentence log-marginal of the grammatical
member strictly exceeds the ungrammatical one; ties count as incorrect.
"""

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .beam import marginal_logprob
from .model import PLM_VARIANTS, joint_logprobs, word_logprobs
from .transitions import DEFAULT_LEGALITY, oracle
from .treebank import Tree, tree_yield

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


class BadSuiteFile(ValueError):
    pass


class MissingGoldParse(ValueError):
    pass


@dataclass(frozen=True)
class SuiteItem:
    item_id: str
    variants: dict      # name -> tuple of (region name, word tuple)
    conditions: tuple   # ((left terms, right terms), ...); term = (variant, region)

    def words(self, variant: str) -> list:
        return [w for _, region in self.variants[variant] for w in region]


@dataclass(frozen=True)
class MinimalPair:
    pair_id: str
    grammatical: tuple
    ungrammatical: tuple


def _word_list(value, where):
    if (not isinstance(value, list) or not value
            or not all(isinstance(w, str) and w for w in value)):
        raise BadSuiteFile(f"{where}: expected a non-empty list of words")
    return tuple(value)


def _parse_item(obj, where) -> SuiteItem:
    try:
        item_id = obj["item_id"]
        raw_variants = obj["variants"]
        raw_conditions = obj["conditions"]
    except (KeyError, TypeError):
        raise BadSuiteFile(f"{where}: needs item_id, variants, conditions") from None
    if not isinstance(raw_variants, dict) or not raw_variants:
        raise BadSuiteFile(f"{where}: variants must be a non-empty object")
    variants = {}
    for name, regions in raw_variants.items():
        if not isinstance(regions, list) or not regions:
            raise BadSuiteFile(f"{where}: variant {name!r} has no regions")
        parsed = []
        for entry in regions:
            if not isinstance(entry, list) or len(entry) != 2:
                raise BadSuiteFile(f"{where}: regions are [name, words] pairs")
            region, words = entry
            parsed.append((region, _word_list(words, f"{where}: region {region!r}")))
        names = [r for r, _ in parsed]
        if len(set(names)) != len(names):
            raise BadSuiteFile(f"{where}: duplicate region in variant {name!r}")
        variants[name] = tuple(parsed)
    if not isinstance(raw_conditions, list) or not raw_conditions:
        raise BadSuiteFile(f"{where}: conditions must be a non-empty list")
    conditions = []
    for cond in raw_conditions:
        try:
            sides = (cond["left"], cond["right"])
        except (KeyError, TypeError):
            raise BadSuiteFile(f"{where}: conditions need left and right") from None
        parsed_sides = []
        for side in sides:
            if not isinstance(side, list) or not side:
                raise BadSuiteFile(f"{where}: condition sides are term lists")
            terms = []
            for term in side:
                if not isinstance(term, list) or len(term) != 2:
                    raise BadSuiteFile(f"{where}: terms are [variant, region]")
                variant, region = term
                if variant not in variants:
                    raise BadSuiteFile(f"{where}: unknown variant {variant!r}")
                if region not in {r for r, _ in variants[variant]}:
                    raise BadSuiteFile(f"{where}: unknown region {region!r} "
                                       f"in variant {variant!r}")
                terms.append((variant, region))
            parsed_sides.append(tuple(terms))
        conditions.append((parsed_sides[0], parsed_sides[1]))
    return SuiteItem(str(item_id), variants, tuple(conditions))


def _parse_pair(obj, where) -> MinimalPair:
    try:
        pair_id = obj["pair_id"]
        good = obj["grammatical"]
        bad = obj["ungrammatical"]
    except (KeyError, TypeError):
        raise BadSuiteFile(
            f"{where}: needs pair_id, grammatical, ungrammatical") from None
    return MinimalPair(str(pair_id),
                       _word_list(good, f"{where}: grammatical"),
                       _word_list(bad, f"{where}: ungrammatical"))


def _load_records(path, parse, limit=None) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if limit is not None and len(out) >= limit:
                break
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BadSuiteFile(f"{path}:{lineno}: bad JSON ({exc})") from None
            out.append(parse(obj, f"{path}:{lineno}"))
    if not out:
        raise BadSuiteFile(f"{path}: no records")
    return out


def load_suite(path, limit=None) -> list:
    return _load_records(path, _parse_item, limit)


def load_pairs(path, limit=None) -> list:
    return _load_records(path, _parse_pair, limit)


def write_pairs(records, path) -> None:
    """records: dicts in the minimal-pair schema (see module docstring)."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _log_unknowns(token_vocab, sentences) -> None:
    known = set(token_vocab.forms)
    unknown = sorted({w for words in sentences for w in words} - known)
    if unknown:
        log.info("%d out-of-vocabulary forms map to <unk>: %s",
                 len(unknown), " ".join(unknown[:10]))


def _region_surprisals(config, params, vocabs, regions, beam_config, legality):
    """Surprisal in bits of each named region given the words before it.

    One marginal pass scores the whole variant; because the search is
    incremental and left-to-right, slicing its per-prefix values equals
    scoring each region separately with its preceding regions as prefix.
    """
    words = [w for _, region in regions for w in region]
    lps = marginal_logprob(config, params, vocabs, words, beam_config,
                           legality)
    out = {}
    start = 0
    for name, region in regions:
        end = start + len(region)
        lp_prefix = float(lps[start - 1]) if start else 0.0
        out[name] = -(float(lps[end - 1]) - lp_prefix) / LN2
        start = end
    return out


def eval_suite(config, params, vocabs, items, beam_config=None,
               legality=DEFAULT_LEGALITY):
    """Score every item; returns (per-item records, summary).

    An item passes iff all its conditions hold (strict inequalities over
    summed region surprisals).
    """
    if not items:
        raise ValueError("no items to score")
    _log_unknowns(vocabs["tokens"],
                  [item.words(v) for item in items for v in item.variants])
    records = []
    passed = 0
    for item in items:
        table = {name: _region_surprisals(config, params, vocabs, regions,
                                          beam_config, legality)
                 for name, regions in item.variants.items()}
        checks = []
        for left, right in item.conditions:
            lhs = sum(table[v][r] for v, r in left)
            rhs = sum(table[v][r] for v, r in right)
            checks.append({"left_bits": lhs, "right_bits": rhs,
                           "holds": lhs < rhs})
        ok = all(c["holds"] for c in checks)
        passed += ok
        records.append({"item_id": item.item_id, "pass": ok,
                        "conditions": checks})
    return records, {"items": len(items), "passed": passed,
                     "accuracy": passed / len(items)}


def eval_pairs(config, params, vocabs, pairs, beam_config=None,
               legality=DEFAULT_LEGALITY):
    """Likelihood comparison on minimal pairs; returns (records, summary)."""
    if not pairs:
        raise ValueError("no pairs to score")
    _log_unknowns(vocabs["tokens"],
                  [p.grammatical for p in pairs] + [p.ungrammatical for p in pairs])
    records = []
    correct = 0
    for pair in pairs:
        lp_good = float(marginal_logprob(config, params, vocabs,
                                         list(pair.grammatical),
                                         beam_config, legality)[-1])
        lp_bad = float(marginal_logprob(config, params, vocabs,
                                        list(pair.ungrammatical),
                                        beam_config, legality)[-1])
        ok = lp_good > lp_bad
        correct += ok
        records.append({"pair_id": pair.pair_id, "correct": ok,
                        "logp_grammatical": lp_good,
                        "logp_ungrammatical": lp_bad})
    return records, {"pairs": len(pairs), "correct": correct,
                     "accuracy": correct / len(pairs)}


def perplexity(config, params, vocabs, items) -> dict:
    """Per-word perplexity.

    Joint-action variants score trees through their gold action
    sequences (the tractable stand-in for the marginal); word-level
    variants score the yields directly.  Both normalize by word-token
    count so the numbers share units.
    """
    nll = 0.0
    word_tokens = 0
    for item in items:
        if isinstance(item, Tree):
            words = list(tree_yield(item))
        elif config.variant in PLM_VARIANTS:
            raise MissingGoldParse(
                f"{config.variant} perplexity needs gold trees")
        else:
            words = list(item)
        if config.variant in PLM_VARIANTS:
            lps = joint_logprobs(config, params, oracle(item), vocabs["joint"])
        else:
            lps = word_logprobs(config, params, words, vocabs["tokens"])
        nll -= float(lps.astype(np.float64).sum())
        word_tokens += len(words)
    if not word_tokens:
        raise ValueError("nothing to score")
    return {"nll": nll, "word_tokens": word_tokens,
            "perplexity": math.exp(nll / word_tokens)}
