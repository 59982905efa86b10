"""Joint modeling of sentences and constituency parses with Transformer LMs.

The package is organized bottom-up:

- :mod:`synlm.treebank`    bracketed constituency trees and corpora
- :mod:`synlm.transitions` top-down transition oracle, legality, attention masks
- :mod:`synlm.vocab`       token / joint-action / action-ngram vocabularies
- :mod:`synlm.tensor`      minimal reverse-mode autodiff on numpy arrays
- :mod:`synlm.model`       decoder-only Transformer, model variants, checkpoints
- :mod:`synlm.train`       AdamW training loop with early stopping
- :mod:`synlm.beam`        word-synchronous beam search and marginal likelihoods
- :mod:`synlm.evaluation`  targeted syntactic suites, minimal pairs, perplexity
- :mod:`synlm.synthdata`   toy PCFG sampling and exhaustive enumeration oracles
- :mod:`synlm.cli`         command-line entry points
"""

__version__ = "0.1.0"
