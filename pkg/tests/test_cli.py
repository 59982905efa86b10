"""End-to-end command-line behavior: exit codes, records, determinism."""

import json

import pytest

from synlm.cli import main
from synlm.transitions import read_oracle_file, reconstruct
from synlm.treebank import read_corpus, parse_tree, tree_yield


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def records(stdout):
    return [json.loads(line) for line in stdout.splitlines()]


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """A tiny corpus plus a trained joint-model checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    corpus = str(root / "corpus.txt")
    pairs = str(root / "pairs.jsonl")
    ckpt = str(root / "plm.ckpt")
    assert main(["synthdata", "--n", "12", "--out", corpus,
                 "--pairs-out", pairs, "--n-pairs", "4"]) == 0
    assert main(["train", "--trees", corpus, "--dev", corpus,
                 "--variant", "plm", "--out", ckpt,
                 "--hidden-size", "16", "--n-layers", "2", "--ff-mult", "2",
                 "--max-len", "64", "--dropout", "0.0",
                 "--lr", "1e-3", "--epochs", "2", "--batch-size", "4"]) == 0
    return {"root": root, "corpus": corpus, "pairs": pairs, "ckpt": ckpt}


# ---------------------------------------------------------------------------
# exit codes

def test_help_exits_zero(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0
    assert "usage:" in out


def test_unknown_subcommand_is_usage_error(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 1
    assert err.startswith("synlm:")


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(capsys, "selftest", "--wat")
    assert code == 1
    assert err.startswith("synlm:")


def test_bad_beam_widths_are_usage_errors(capsys, workspace):
    code, _, err = run(capsys, "parse", "--ckpt", workspace["ckpt"],
                       "--sentence", "the dog runs",
                       "--word-beam", "4", "--fast-track", "9")
    assert code == 1
    assert "fast_track" in err


def test_missing_file_is_data_error(capsys, tmp_path):
    code, _, err = run(capsys, "oracle", "--trees", str(tmp_path / "nope"),
                       "--out", str(tmp_path / "out"))
    assert code == 2
    assert err.startswith("synlm:")


def test_malformed_pairs_file_is_data_error(capsys, tmp_path, workspace):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"pair_id": "p"}\n')
    code, _, err = run(capsys, "eval-pairs", "--ckpt", workspace["ckpt"],
                       "--pairs", str(bad))
    assert code == 2
    assert "pair_id" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
def test_divergent_training_is_numeric_error(capsys, workspace):
    code, _, err = run(capsys, "train", "--trees", workspace["corpus"],
                       "--variant", "lm",
                       "--out", str(workspace["root"] / "junk.ckpt"),
                       "--hidden-size", "16", "--n-layers", "2",
                       "--ff-mult", "2", "--max-len", "64",
                       "--dropout", "0.0", "--lr", "1e30", "--epochs", "2")
    assert code == 3
    assert "synlm:" in err


def test_eval_ppl_needs_exactly_one_input(capsys, workspace):
    code, _, _ = run(capsys, "eval-ppl", "--ckpt", workspace["ckpt"])
    assert code == 1
    code, _, _ = run(capsys, "eval-ppl", "--ckpt", workspace["ckpt"],
                     "--trees", workspace["corpus"],
                     "--sentences", workspace["corpus"])
    assert code == 1


# ---------------------------------------------------------------------------
# the config echo record

def test_every_run_starts_with_config_record(capsys, workspace):
    _, out, _ = run(capsys, "parse", "--ckpt", workspace["ckpt"],
                    "--sentence", "the dog runs")
    first = records(out)[0]
    assert first["record"] == "config"
    assert first["command"] == "parse"
    assert "version" in first
    # resolved beam defaults are visible even when not set explicitly
    assert (first["action_beam"], first["word_beam"],
            first["fast_track"]) == (100, 10, 5)
    assert first["seed"] == 0


# ---------------------------------------------------------------------------
# pipeline behavior

def test_oracle_round_trips_through_file(capsys, workspace, tmp_path):
    out_path = str(tmp_path / "oracle.txt")
    code, out, _ = run(capsys, "oracle", "--trees", workspace["corpus"],
                       "--out", out_path)
    assert code == 0
    trees = read_corpus(workspace["corpus"])
    assert [reconstruct(seq) for seq in read_oracle_file(out_path)] == trees
    assert records(out)[-1]["trees"] == len(trees)


def test_vocab_reports_sizes_and_digests(capsys, workspace, tmp_path):
    argv = ("vocab", "--trees", workspace["corpus"],
            "--out-tokens", str(tmp_path / "tok.txt"),
            "--out-joint", str(tmp_path / "joint.txt"))
    code, out, _ = run(capsys, *argv)
    assert code == 0
    summary = records(out)[-1]
    assert summary["tokens"] > 3 and summary["joint"] > summary["tokens"]
    assert len(summary["token_digest"]) == len(summary["joint_digest"]) > 8
    code2, out2, _ = run(capsys, *argv)
    assert (code2, out2) == (0, out)


def test_parse_emits_a_tree_over_the_sentence(capsys, workspace):
    code, out, _ = run(capsys, "parse", "--ckpt", workspace["ckpt"],
                       "--sentence", "the dog runs")
    assert code == 0
    record = records(out)[-1]
    assert record["record"] == "parse"
    tree = parse_tree(record["tree"])
    assert tree_yield(tree) == ["the", "dog", "runs"]


def test_surprisal_reports_positive_bits(capsys, workspace):
    code, out, _ = run(capsys, "surprisal", "--ckpt", workspace["ckpt"],
                       "--prefix", "the dog", "--continuation", "runs")
    assert code == 0
    record = records(out)[-1]
    assert record["surprisal_bits"] > 0.0
    assert record["beam_config"]["word_beam"] == 10


def test_surprisal_rejects_empty_continuation(capsys, workspace):
    code, _, err = run(capsys, "surprisal", "--ckpt", workspace["ckpt"],
                       "--prefix", "the dog", "--continuation", " ")
    assert code == 1
    assert "continuation" in err


def test_eval_pairs_reports_accuracy_and_limit(capsys, workspace):
    code, out, _ = run(capsys, "eval-pairs", "--ckpt", workspace["ckpt"],
                       "--pairs", workspace["pairs"], "--limit", "2")
    assert code == 0
    recs = records(out)
    pair_records = [r for r in recs if r["record"] == "pair"]
    assert len(pair_records) == 2
    summary = recs[-1]
    assert summary["pairs"] == 2
    assert 0.0 <= summary["accuracy"] <= 1.0


def test_eval_ppl_scores_trees_and_sentences(capsys, workspace, tmp_path):
    code, out, _ = run(capsys, "eval-ppl", "--ckpt", workspace["ckpt"],
                       "--trees", workspace["corpus"])
    assert code == 0
    assert records(out)[-1]["perplexity"] > 1.0
    # sentence input is reserved for word-level models
    sents = tmp_path / "sents.txt"
    sents.write_text("the dog runs\n")
    code, _, err = run(capsys, "eval-ppl", "--ckpt", workspace["ckpt"],
                       "--sentences", str(sents))
    assert code == 2
    assert "gold trees" in err


def test_synthdata_pairs_are_held_out(capsys, workspace):
    trained_on = {" ".join(tree_yield(t))
                  for t in read_corpus(workspace["corpus"])}
    with open(workspace["pairs"], encoding="utf-8") as fh:
        for line in fh:
            pair = json.loads(line)
            assert " ".join(pair["grammatical"]) not in trained_on


# ---------------------------------------------------------------------------
# determinism and formatting

def test_training_is_bit_reproducible(capsys, workspace, tmp_path):
    outs = []
    ckpts = []
    for name in ("a.ckpt", "b.ckpt"):
        ckpt = tmp_path / name
        argv = ("train", "--trees", workspace["corpus"], "--variant", "lm",
                "--out", str(ckpt), "--hidden-size", "16", "--n-layers", "2",
                "--ff-mult", "2", "--max-len", "64", "--dropout", "0.1",
                "--lr", "1e-3", "--epochs", "2", "--batch-size", "4")
        code, out, _ = run(capsys, *argv)
        assert code == 0
        outs.append(out.replace(str(ckpt), "CKPT"))
        ckpts.append(ckpt.read_bytes())
    assert outs[0] == outs[1]
    assert ckpts[0] == ckpts[1]


def test_eval_pairs_is_bit_reproducible(capsys, workspace):
    argv = ("eval-pairs", "--ckpt", workspace["ckpt"],
            "--pairs", workspace["pairs"])
    _, first, _ = run(capsys, *argv)
    _, second, _ = run(capsys, *argv)
    assert first == second


def test_floats_print_at_nine_significant_digits(capsys, workspace):
    _, out, _ = run(capsys, "surprisal", "--ckpt", workspace["ckpt"],
                    "--prefix", "the dog", "--continuation", "runs")
    for record in records(out):
        def walk(value):
            if isinstance(value, float):
                assert value == float(f"{value:.9g}")
            elif isinstance(value, dict):
                for v in value.values():
                    walk(v)
            elif isinstance(value, list):
                for v in value:
                    walk(v)
        walk(record)
