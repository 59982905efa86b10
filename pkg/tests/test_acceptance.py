"""Acceptance gate: twelve criteria, one visible pass/fail line each.

Each criterion records an `ACCEPTANCE n: PASS/FAIL: detail` line (replayed
into the run log by the terminal-summary hook in conftest.py) and then
asserts.  Tolerances and time budgets are encoded in the assertions
themselves.
"""

import math
import subprocess
import sys
import time

import numpy as np

from acceptance_report import report
from synlm import beam as B
from synlm import checks
from synlm import evaluation as E
from synlm import model as M
from synlm import synthdata as S
from synlm.train import TrainConfig, build_vocabs, model_config_for, train
from synlm.transitions import (BOS, INITIAL_STATE, REDUCE, HeadMaskRow, apply,
                               gen, head_masks, legal_actions, nt, oracle,
                               reconstruct, sync_ngrams)
from synlm.treebank import Tree, parse_tree, tree_yield
from synlm.vocab import (NGRAM_BLANK_ID, NGRAM_PAD_ID, JointActionVocab,
                         TokenVocab, build_ngram_vocab)

from oracles import brute_force_mask_sets, random_tree

EXAMPLE_TREE = parse_tree("(S (NP The birds) (VP sang))")
EXAMPLE_ORACLE = [BOS, nt("S"), nt("NP"), gen("The"), gen("birds"), REDUCE,
                  nt("VP"), gen("sang"), REDUCE, REDUCE]

TOY_TOKENS = TokenVocab(("<pad>", "<unk>", "<bos>", "a", "b"))
TOY_JOINT = JointActionVocab(TOY_TOKENS, ("S",))
TOY_VOCABS = {"tokens": TOY_TOKENS, "joint": TOY_JOINT}
EXACT_BEAM = B.BeamConfig(action_beam=4096, word_beam=4096, fast_track=0)


def toy_config(variant, max_len=8):
    return M.ModelConfig(vocab_size=len(TOY_JOINT), variant=variant,
                         hidden_size=16, n_heads=4, n_layers=2, ff_mult=2,
                         max_len=max_len, dropout_p=0.0)


def nested_tree(words):
    tree = Tree("S", (words[-1],))
    for w in reversed(words[:-1]):
        tree = Tree("S", (w, tree))
    return tree


def random_legal_prefix(rng, labels, words, max_steps):
    actions = [BOS]
    state = apply(INITIAL_STATE, BOS)
    for _ in range(max_steps):
        kinds = sorted(legal_actions(state))
        if not kinds:
            break
        kind = kinds[rng.integers(len(kinds))]
        if kind == "NT":
            action = nt(labels[rng.integers(len(labels))])
        elif kind == "GEN":
            action = gen(words[rng.integers(len(words))])
        else:
            action = REDUCE
        state = apply(state, action)
        actions.append(action)
    return actions


def test_criterion_01_oracle_round_trip():
    t0 = time.monotonic()
    rng = np.random.default_rng(11)
    bad = sum(reconstruct(oracle(t)) != t
              for t in (random_tree(rng) for _ in range(1000)))
    example_ok = (oracle(EXAMPLE_TREE) == EXAMPLE_ORACLE
                  and reconstruct(EXAMPLE_ORACLE) == EXAMPLE_TREE)
    dt = time.monotonic() - t0
    report(1, bad == 0 and example_ok and dt < 5.0,
           f"oracle round-trip {1000 - bad}/1000 trees plus the worked "
           f"example, {dt:.1f}s (budget 5s)")


def test_criterion_02_mask_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(22)
    labels = ("S", "NP", "VP", "PP")
    words = ("the", "dog", "runs")
    mismatches = 0
    for _ in range(10_000):
        actions = random_legal_prefix(rng, labels, words,
                                      int(rng.integers(1, 16)))
        want = brute_force_mask_sets(actions)
        rows = head_masks(actions)
        for row, (stack, outside) in zip(rows, want):
            if (set(np.flatnonzero(row.stack_visible).tolist()) != stack or
                    set(np.flatnonzero(row.outside_visible).tolist()) != outside):
                mismatches += 1
                break
    dt = time.monotonic() - t0
    report(2, mismatches == 0 and dt < 30.0,
           f"head masks match brute-force replay on 10,000 prefixes "
           f"({mismatches} mismatches), {dt:.1f}s (budget 30s)")


def test_criterion_03_attention_soundness():
    trees = S.sample_corpus(S.agreement_grammar(seed=33), 40)
    vocabs = build_vocabs("plm-mask", trees, [])
    config = model_config_for("plm-mask", vocabs, hidden_size=128, n_heads=4,
                              n_layers=4, ff_mult=4, max_len=256,
                              dropout_p=0.0)
    params = M.init_params(config, 33)
    labels = tuple(vocabs["joint"].nt_labels)
    rng = np.random.default_rng(33)
    worst_sum = 0.0
    leaks = 0
    for _ in range(100):
        actions = random_legal_prefix(rng, labels, ("the", "dog", "runs"),
                                      int(rng.integers(2, 40)))
        ids = vocabs["joint"].encode_sequence(actions)
        attn = {}
        M.forward(config, params, ids, head_masks(actions), collect_attn=attn)
        sets = brute_force_mask_sets(actions)
        t = len(actions)
        for layer in range(config.n_layers):
            for head in range(config.n_heads):
                a = attn[(layer, head)]
                worst_sum = max(worst_sum,
                                float(np.abs(a.sum(axis=0) - 1.0).max()))
                for q in range(t):
                    if head == 0:
                        visible = sets[q][0]
                    elif head == 1:
                        visible = sets[q][1]
                    else:
                        visible = set(range(q + 1))
                    masked = sorted(set(range(t)) - visible)
                    if masked and a[masked, q].any():
                        leaks += 1
    report(3, leaks == 0 and worst_sum <= 1e-6,
           f"100 masked forwards (H=128, N=4, M=4): masked keys exactly "
           f"zero ({leaks} leaks), column sums within {worst_sum:.1e} "
           f"(tol 1e-6)")


def test_criterion_04_gradient_check():
    t0 = time.monotonic()
    results = checks.gradcheck_all(seed=0, tol=1e-4)
    dt = time.monotonic() - t0
    detail = ", ".join(f"{name.split('[')[1][:-1]} {d.split()[3]}"
                       for name, _, d in results)
    report(4, all(ok for _, ok, _ in results) and dt < 120.0,
           f"finite-difference gradcheck all variants (H=16, N=4, M=2, "
           f"float64, tol 1e-4): {detail}; {dt:.0f}s (budget 120s)")


def test_criterion_05_beam_exactness():
    t0 = time.monotonic()
    words = ["a", "b", "a"]
    worst = 0.0
    for variant in M.PLM_VARIANTS:
        for seed in (0, 1):
            config = toy_config(variant)
            params = M.init_params(config, seed)
            want = S.enumerate_word_marginals(config, params, TOY_JOINT, words)
            got = B.BeamSearch(config, params, TOY_JOINT,
                               EXACT_BEAM).marginal_logprobs(words)
            worst = max(worst, float(np.max(np.abs(got - want)
                                            / np.abs(want))))
    dt = time.monotonic() - t0
    report(5, worst <= 1e-9 and dt < 60.0,
           f"unpruned beam equals exhaustive word marginals at every step, "
           f"max rel err {worst:.2e} (tol 1e-9), {dt:.1f}s (budget 60s)")


def test_criterion_06_beam_monotonicity():
    words = ["a", "b", "a"]
    violations = 0
    for seed in range(20):
        variant = M.PLM_VARIANTS[seed % 2]
        config = toy_config(variant)
        params = M.init_params(config, seed)
        prev = None
        for word_beam in range(1, 7):
            cfg = B.BeamConfig(action_beam=64, word_beam=word_beam,
                               fast_track=1)
            cur = B.BeamSearch(config, params, TOY_JOINT,
                               cfg).marginal_logprobs(words)
            if prev is not None and not np.all(cur >= prev):
                violations += 1
            prev = cur
    report(6, violations == 0,
           f"beam marginal non-decreasing in word_beam on 20 random toy "
           f"models, exact ({violations} violations)")


def test_criterion_07_overfit_sanity():
    # 32 sentences with a low empirical-entropy floor: 2 distinct nested
    # sentence types x 16 copies, floor = ln(2)/33 = 0.021 nats/action
    t0 = time.monotonic()
    trees = [nested_tree(["a", "b"] * 4), nested_tree(["b", "a"] * 4)] * 16
    vocabs = build_vocabs("plm", trees, [])
    config = model_config_for("plm", vocabs, hidden_size=128, n_heads=4,
                              n_layers=4, ff_mult=4, max_len=256,
                              dropout_p=0.0)
    steps_per_epoch = math.ceil(len(trees) / 5)
    hit = {}

    class Stop(Exception):
        pass

    def on_epoch(epoch, history):
        last = [h for h in history if h["split"] == "train"][-1]
        if last["loss"] < 0.05:
            hit["steps"] = epoch * steps_per_epoch
            hit["loss"] = last["loss"]
            raise Stop

    tc = TrainConfig(lr=1e-3, batch_size=5, seed=0, patience=10 ** 9,
                     max_epochs=2000 // steps_per_epoch)
    try:
        train(config, trees, [], vocabs, tc, on_epoch=on_epoch)
    except Stop:
        pass
    dt = time.monotonic() - t0
    report(7, "steps" in hit and hit["steps"] <= 2000 and dt < 600.0,
           f"desk-config overfit (lr 1e-3, AdamW, batch 5) reached "
           f"{hit.get('loss', float('nan')):.3f} nats/action at step "
           f"{hit.get('steps', '>2000')} (gate < 0.05 within 2000), "
           f"{dt:.0f}s (budget 600s)")


def test_criterion_08_scaffold_alignment():
    segments, trailing = sync_ngrams(EXAMPLE_ORACLE)
    spans = [seg.preceding_ngram for seg in segments]
    want_spans = [(nt("S"), nt("NP")), (), (REDUCE, nt("VP"))]
    ngrams = build_ngram_vocab([EXAMPLE_ORACLE])
    next_targets, next_weights = M.scaffold_targets(segments, "sclm-next",
                                                    ngrams)
    past_targets, past_weights = M.scaffold_targets(segments, "sclm-past",
                                                    ngrams)
    ok = (spans == want_spans and trailing == [REDUCE, REDUCE]
          and [seg.word for seg in segments] == ["The", "birds", "sang"]
          and list(next_targets) == [ngrams.encode(s) for s in want_spans]
          and next_targets[1] == NGRAM_BLANK_ID
          and list(next_weights) == [1.0, 1.0, 1.0]
          and list(past_targets) == [NGRAM_PAD_ID,
                                     ngrams.encode(want_spans[0]),
                                     NGRAM_BLANK_ID]
          and list(past_weights) == [0.0, 1.0, 1.0])
    report(8, ok,
           "scaffold targets on the worked example: next = "
           "((NT(S),NT(NP)), BLANK, (REDUCE,NT(VP))), past shifted with "
           "leading PAD and zero weight")


def test_criterion_09_synthetic_generalization():
    t0 = time.monotonic()
    trees = S.sample_corpus(S.agreement_grammar(seed=9), 2000)
    seen = {" ".join(tree_yield(t)) for t in trees}
    pairs = [E.MinimalPair(p["pair_id"], tuple(p["grammatical"]),
                           tuple(p["ungrammatical"]))
             for p in S.agreement_pairs(200, seed=10, exclude=seen)]
    train_trees, dev_trees = trees[:1800], trees[1800:]
    accuracy = {}
    for variant in ("plm", "lm"):
        vocabs = build_vocabs(variant, train_trees, dev_trees)
        config = model_config_for(variant, vocabs, hidden_size=64,
                                  n_heads=4, n_layers=2, ff_mult=2,
                                  max_len=128, dropout_p=0.0)
        tc = TrainConfig(lr=1e-3, batch_size=5, max_epochs=3, patience=3,
                         seed=0)
        result = train(config, train_trees, dev_trees, vocabs, tc)
        _, summary = E.eval_pairs(config, result.params, vocabs, pairs)
        accuracy[variant] = summary["accuracy"]
    dt = time.monotonic() - t0
    report(9, accuracy["plm"] >= 0.90 and dt < 1800.0,
           f"2000-sentence agreement training, 200 held-out pairs: "
           f"plm {accuracy['plm']:.3f} (gate >= 0.90), "
           f"lm {accuracy['lm']:.3f} (reported), {dt:.0f}s (budget 1800s)")


def test_criterion_10_mask_neutrality():
    plm_config = toy_config("plm", max_len=64)
    mask_config = toy_config("plm-mask", max_len=64)
    params = M.init_params(plm_config, 44)
    assert all(np.array_equal(params[k].data,
                              M.init_params(mask_config, 44)[k].data)
               for k in params)
    rng = np.random.default_rng(44)
    identical = True
    for _ in range(10):
        actions = random_legal_prefix(rng, ("S",), ("a", "b"), 20)
        ids = TOY_JOINT.encode_sequence(actions)
        all_visible = [HeadMaskRow(np.ones(i + 1, bool), np.ones(i + 1, bool))
                       for i in range(len(ids))]
        base, _ = M.forward(plm_config, params, ids, None)
        forced, _ = M.forward(mask_config, params, ids, all_visible)
        identical &= np.array_equal(base.data, forced.data)
    report(10, identical,
           "plm-mask with all-visible structural masks reproduces plm "
           "logits bit for bit on 10 random prefixes")


def test_criterion_11_determinism(tmp_path):
    def run(*argv):
        proc = subprocess.run([sys.executable, "-m", "synlm.cli", *argv],
                              capture_output=True, cwd=tmp_path)
        assert proc.returncode == 0, proc.stderr.decode()
        return proc.stdout

    corpus = tmp_path / "corpus.txt"
    pairs = tmp_path / "pairs.jsonl"
    assert run("synthdata", "--n", "24", "--out", str(corpus),
               "--pairs-out", str(pairs), "--n-pairs", "6")
    outputs = {}
    for name in ("one", "two"):
        ckpt = tmp_path / f"{name}.ckpt"
        train_out = run("train", "--trees", str(corpus), "--variant", "plm",
                        "--out", str(ckpt), "--hidden-size", "16",
                        "--n-layers", "2", "--ff-mult", "2",
                        "--max-len", "128", "--dropout", "0.1",
                        "--lr", "1e-3", "--epochs", "2", "--seed", "7")
        outputs[name] = {
            "selftest": run("selftest", "--seed", "0"),
            "train": train_out.replace(str(ckpt).encode(), b"CKPT"),
            "ckpt": ckpt.read_bytes(),
            "eval": run("eval-pairs", "--ckpt", str(ckpt), "--pairs",
                        str(pairs)).replace(str(ckpt).encode(), b"CKPT"),
        }
    same = {k: outputs["one"][k] == outputs["two"][k]
            for k in outputs["one"]}
    report(11, all(same.values()),
           "selftest, train (stdout and checkpoint bytes), and eval-pairs "
           "byte-identical across two same-seed runs: "
           + ", ".join(f"{k} {'ok' if v else 'DIFFERS'}"
                       for k, v in same.items()))


def test_criterion_12_gold_vs_marginal_nll():
    grammar = S.ToyPCFG((("S", ("a",), 0.35), ("S", ("b",), 0.35),
                         ("S", ("S", "S"), 0.30)), "S", seed=12)
    config = toy_config("plm", max_len=10)
    params = M.init_params(config, 12)
    rng = np.random.default_rng(12)
    scored = 0
    ordered = True
    min_gap = float("inf")
    while scored < 50:
        tree = S.sample_corpus(grammar, 1, seed=int(rng.integers(2 ** 63)))[0]
        acts = oracle(tree)
        if len(acts) > config.max_len:
            continue
        scored += 1
        gold_nll = -float(M.joint_logprobs(config, params, acts, TOY_JOINT)
                          .astype(np.float64).sum())
        marginal = S.enumerate_word_marginals(config, params, TOY_JOINT,
                                              list(tree_yield(tree)))
        marg_nll = -float(marginal[-1])
        ordered &= gold_nll >= marg_nll
        min_gap = min(min_gap, gold_nll - marg_nll)
    report(12, ordered,
           f"gold-parse NLL >= exhaustive marginal NLL on 50 sampled toy "
           f"sentences, exact (min gap {min_gap:.3f} nats)")
