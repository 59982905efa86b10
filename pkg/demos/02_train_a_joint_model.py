"""
Training a joint words-and-structure model
==========================================

The same decoder-only transformer can be trained as a plain language
model over words or as a generative parser over the joint action
sequence.  Here we sample a small synthetic treebank, train the joint
variant for a few epochs, and save a checkpoint that the other demos
can reload.
"""

import tempfile
from pathlib import Path

from synlm.model import load_checkpoint, save_checkpoint
from synlm.synthdata import agreement_grammar, sample_corpus
from synlm.train import TrainConfig, build_vocabs, model_config_for, train
from synlm.treebank import render_tree

# sample a corpus from the fixed agreement grammar; every subject noun
# must match its verb in number, sometimes across an intervening PP
trees = sample_corpus(agreement_grammar(seed=0), 300)
train_trees, dev_trees = trees[:260], trees[260:]
print("example sentence:", render_tree(train_trees[0]))

# vocabularies: word tokens from train only, nonterminal labels from both
vocabs = build_vocabs("plm", train_trees, dev_trees)
print(f"{len(vocabs['tokens'])} word tokens, "
      f"{len(vocabs['joint'])} joint actions")

# a deliberately small decoder so the demo runs in seconds
config = model_config_for("plm", vocabs, hidden_size=32, n_heads=4,
                          n_layers=2, ff_mult=2, max_len=128, dropout_p=0.1)
train_config = TrainConfig(lr=1e-3, batch_size=5, max_epochs=3, patience=3,
                           seed=0)
result = train(config, train_trees, dev_trees, vocabs, train_config)

for entry in result.history:
    print(f"epoch {entry['epoch']} {entry['split']:5s} "
          f"loss {entry['loss']:.4f}")

# checkpoints are single files: one JSON manifest line, then the weights
out = Path(tempfile.gettempdir()) / "synlm_demo.ckpt"
save_checkpoint(out, config, result.params, vocabs,
                {"best_epoch": result.best_epoch})
reloaded_config, _, _, extra = load_checkpoint(out)
print(f"saved {out} ({out.stat().st_size} bytes), "
      f"variant {reloaded_config.variant}, best epoch {extra['best_epoch']}")
