import numpy as np
import pytest

from synlm import transitions as tr
from synlm.transitions import (Action, BadActionString, IllegalAction,
                               IncompleteSequence, LegalityConfig, TrailingActions,
                               BOS, REDUCE, gen, nt)
from synlm.treebank import parse_tree, render_tree

from oracles import brute_force_mask_sets, mask_row_sets, random_tree

EXAMPLE = "(S (NP The birds) (VP sang))"
EXAMPLE_ORACLE = [BOS, nt("S"), nt("NP"), gen("The"), gen("birds"), REDUCE,
                  nt("VP"), gen("sang"), REDUCE, REDUCE]
# the EXAMPLE oracle truncated mid-sentence, one constituent just opened
EXAMPLE_PREFIX = EXAMPLE_ORACLE[:8] + [nt("ADVP")]


def random_legal_prefix(rng, max_steps, config=tr.DEFAULT_LEGALITY,
                        labels=("S", "NP", "VP"), words=("a", "b", "c")):
    """Random walk through the state machine; returns (actions, final state)."""
    actions = [BOS]
    state = tr.apply(tr.INITIAL_STATE, BOS, config)
    for _ in range(max_steps - 1):
        kinds = tr.legal_actions(state, config)
        if not kinds:
            break
        kind = sorted(kinds)[rng.integers(len(kinds))]
        if kind == "NT":
            action = nt(labels[rng.integers(len(labels))])
        elif kind == "GEN":
            action = gen(words[rng.integers(len(words))])
        else:
            action = REDUCE
        actions.append(action)
        state = tr.apply(state, action, config)
    return actions, state


def test_example_sentence_oracle():
    assert tr.oracle(parse_tree(EXAMPLE)) == EXAMPLE_ORACLE


def test_single_word_oracle():
    assert tr.oracle(parse_tree("(X a)")) == [BOS, nt("X"), gen("a"), REDUCE]


def test_reconstruct_inverts_oracle():
    assert render_tree(tr.reconstruct(EXAMPLE_ORACLE)) == EXAMPLE
    rng = np.random.default_rng(2)
    for _ in range(300):
        tree = random_tree(rng)
        assert tr.reconstruct(tr.oracle(tree)) == tree


def test_reconstruct_errors():
    with pytest.raises(IllegalAction):
        tr.reconstruct([BOS, nt("S"), REDUCE])  # empty constituent
    with pytest.raises(IllegalAction):
        tr.reconstruct([BOS, gen("a")])  # first action must be NT
    with pytest.raises(IllegalAction):
        tr.reconstruct([nt("S"), gen("a"), REDUCE])  # missing BOS
    with pytest.raises(IncompleteSequence):
        tr.reconstruct([BOS, nt("S"), gen("a")])
    with pytest.raises(TrailingActions):
        tr.reconstruct([BOS, nt("S"), gen("a"), REDUCE, nt("X")])


def test_legal_actions_progression():
    state = tr.INITIAL_STATE
    assert tr.legal_actions(state) == {"BOS"}
    state = tr.apply(state, BOS)
    assert tr.legal_actions(state) == {"NT"}
    state = tr.apply(state, nt("S"))
    assert tr.legal_actions(state) == {"NT", "GEN"}  # no REDUCE on empty constituent
    state = tr.apply(state, gen("a"))
    assert tr.legal_actions(state) == {"NT", "GEN", "REDUCE"}
    state = tr.apply(state, REDUCE)
    assert tr.legal_actions(state) == set()  # root closed: terminate
    with pytest.raises(IllegalAction):
        tr.apply(state, gen("b"))


def test_open_constituent_cap():
    config = LegalityConfig(max_open_constituents=3)
    actions = [BOS, nt("S"), nt("S"), nt("S")]
    state = tr.replay(actions, config)
    assert tr.legal_actions(state, config) == {"GEN"}  # cap reached, top empty
    state = tr.apply(state, gen("a"), config)
    assert tr.legal_actions(state, config) == {"GEN", "REDUCE"}


def test_apply_stack_bookkeeping():
    state = tr.replay([BOS, nt("S"), nt("NP")])
    assert state.open_stack == (("S", 1), ("NP", 2))
    assert state.position == 3
    state = tr.apply(state, gen("a"))
    assert state.open_stack == (("S", 1), ("NP", 2))
    state = tr.apply(state, REDUCE)
    assert state.open_stack == (("S", 1),)
    assert state.n_completed_roots == 0


def test_sync_ngrams_example_prefix():
    segments, trailing = tr.sync_ngrams(EXAMPLE_PREFIX)
    assert [(s.word, s.preceding_ngram) for s in segments] == [
        ("The", (nt("S"), nt("NP"))),
        ("birds", ()),
        ("sang", (REDUCE, nt("VP"))),
    ]
    assert trailing == [nt("ADVP")]


def test_sync_ngrams_trivial():
    segments, trailing = tr.sync_ngrams([BOS, nt("X"), gen("a"), REDUCE])
    assert [(s.word, s.preceding_ngram) for s in segments] == [("a", (nt("X"),))]
    assert trailing == [REDUCE]


def test_sync_ngrams_validates_legality():
    with pytest.raises(IllegalAction):
        tr.sync_ngrams([BOS, gen("a")])


def test_sync_ngrams_reconcatenation():
    rng = np.random.default_rng(3)
    for _ in range(200):
        actions, _ = random_legal_prefix(rng, int(rng.integers(2, 40)))
        segments, trailing = tr.sync_ngrams(actions)
        rebuilt = [BOS]
        for seg in segments:
            rebuilt.extend(seg.preceding_ngram)
            rebuilt.append(gen(seg.word))
        rebuilt.extend(trailing)
        assert rebuilt == actions


def test_mask_example_row():
    rows = tr.head_masks([BOS, nt("S"), nt("NP"), gen("The"), gen("birds")])
    stack, outside = mask_row_sets(rows[-1])
    assert stack == {2, 3, 4}  # NT(NP), The, birds
    assert outside == {0, 1}  # BOS, NT(S)


def test_mask_degenerate_first_row():
    rows = tr.head_masks([BOS])
    stack, outside = mask_row_sets(rows[0])
    assert stack == {0} and outside == {0}


def test_masks_match_brute_force_replay():
    rng = np.random.default_rng(4)
    for _ in range(500):
        actions, _ = random_legal_prefix(rng, int(rng.integers(1, 40)))
        rows = tr.head_masks(actions)
        expected = brute_force_mask_sets(actions)
        assert len(rows) == len(actions)
        for row, (exp_stack, exp_outside) in zip(rows, expected):
            assert mask_row_sets(row) == (exp_stack, exp_outside)


def test_mask_partition_property():
    rng = np.random.default_rng(5)
    for _ in range(200):
        actions, _ = random_legal_prefix(rng, int(rng.integers(1, 40)))
        for t, row in enumerate(tr.head_masks(actions), start=1):
            stack, outside = mask_row_sets(row)
            assert stack | outside == set(range(t))
            assert stack and outside
            if t > 1:
                assert not stack & outside  # overlap only in the first row


def test_mask_stack_window_moves_left_after_reduce():
    rng = np.random.default_rng(6)
    checked = 0
    for _ in range(200):
        actions, _ = random_legal_prefix(rng, int(rng.integers(3, 40)))
        rows = tr.head_masks(actions)
        for i, action in enumerate(actions):
            if action.kind != "REDUCE" or i + 1 == len(actions):
                continue
            state = tr.replay(actions[: i + 1])
            if not state.open_stack:
                continue  # root closed
            before = int(np.flatnonzero(rows[i - 1].stack_visible)[0])
            after = int(np.flatnonzero(rows[i].stack_visible)[0])
            assert after < before
            checked += 1
    assert checked > 50


def test_all_visible_masks():
    rows = tr.all_visible_masks(4)
    assert [len(r.stack_visible) for r in rows] == [1, 2, 3, 4]
    assert all(r.stack_visible.all() and r.outside_visible.all() for r in rows)


def test_action_string_round_trip():
    line = tr.actions_to_line(EXAMPLE_ORACLE)
    assert line == "NT(S) NT(NP) GEN(The) GEN(birds) REDUCE NT(VP) GEN(sang) REDUCE REDUCE"
    assert tr.line_to_actions(line) == EXAMPLE_ORACLE


@pytest.mark.parametrize("text", ["FOO", "NT()", "GEN(a b)", "NT(a", "REDUCE(x)"])
def test_bad_action_strings(text):
    with pytest.raises(BadActionString):
        Action.from_string(text)


def test_oracle_file_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    seqs = [tr.oracle(random_tree(rng)) for _ in range(30)]
    path = tmp_path / "oracle.txt"
    tr.write_oracle_file(seqs, path)
    assert tr.read_oracle_file(path) == seqs
    text = path.read_text(encoding="utf-8")
    assert "BOS" not in text
