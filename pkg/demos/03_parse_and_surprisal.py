"""
Parsing and surprisal through the word-synchronous beam
=======================================================

A joint model assigns probability to (tree, sentence) pairs, so the
probability of a sentence alone is a sum over parses.  The
word-synchronous beam keeps a fixed number of partial parses per word
and marginalizes over them, which yields both a best parse and a
per-continuation surprisal.
"""

from synlm.beam import BeamConfig, parse, surprisal
from synlm.synthdata import agreement_grammar, sample_corpus
from synlm.train import TrainConfig, build_vocabs, model_config_for, train
from synlm.treebank import render_tree

# train a small joint model (see demo 02 for the slower narrated version)
trees = sample_corpus(agreement_grammar(seed=1), 300)
vocabs = build_vocabs("plm", trees, [])
config = model_config_for("plm", vocabs, hidden_size=32, n_heads=4,
                          n_layers=2, ff_mult=2, max_len=128, dropout_p=0.0)
result = train(config, trees, [], vocabs,
               TrainConfig(lr=1e-3, batch_size=5, max_epochs=3, patience=3,
                           seed=0))
params = result.params

# the beam widths trade accuracy for speed; these are the defaults
beam = BeamConfig(action_beam=100, word_beam=10, fast_track=5)

sentence = "the dog near the cats runs".split()
best = parse(config, params, vocabs, sentence, beam)
print("sentence:  ", " ".join(sentence))
print("best parse:", render_tree(best))

# surprisal is -log2 p(continuation | prefix) under the beam marginal.
# the grammatical verb should be the cheaper continuation even though
# the plural attractor "cats" sits right before it
prefix = "the dog near the cats".split()
for verb in ("runs", "run"):
    bits = surprisal(config, params, vocabs, prefix, [verb], beam)
    print(f"surprisal of {verb!r} after {' '.join(prefix)!r}: {bits:.2f} bits")
