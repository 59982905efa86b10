"""
From bracketed trees to action sequences and back
==================================================

A constituency parse can be rewritten as the exact sequence of moves a
top-down generative parser makes: open a constituent, emit a word, close
the most recent constituent.  This script walks that correspondence on a
small sentence and then peeks at the structural attention masks the
joint model derives from a partial parse.
"""

import numpy as np

from synlm.transitions import head_masks, nt, oracle, reconstruct
from synlm.treebank import parse_tree, render_tree, tree_yield

# a parse in ordinary bracketed notation
tree = parse_tree("(S (NP The birds) (VP sang))")
print("tree:    ", render_tree(tree))
print("yield:   ", " ".join(tree_yield(tree)))

# the oracle is the unique action sequence generating tree and yield
actions = oracle(tree)
print("oracle:  ", " ".join(str(a) for a in actions))

# the mapping is invertible, so actions are a lossless tree encoding
assert reconstruct(actions) == tree
print("reconstruct(oracle(tree)) == tree")

# every prefix of the oracle is a parser state; the masked model gives
# two attention heads hard visibility sets derived from that state: the
# stack head sees the deepest open constituent, the outside head the
# context before it
prefix = actions[:8] + [nt("ADVP")]
print("\nprefix:  ", " ".join(str(a) for a in prefix))
for i, row in enumerate(head_masks(prefix)):
    stack = np.flatnonzero(row.stack_visible).tolist()
    outside = np.flatnonzero(row.outside_visible).tolist()
    print(f"after {i + 1:2d} actions: stack sees {stack}, outside sees {outside}")
