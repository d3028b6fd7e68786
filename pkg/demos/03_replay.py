"""How the fixed replay budget is shared as classes arrive."""
# %%
import numpy as np

from adaptmerge.data import load_corpus
from adaptmerge.replay import ReplayBuffer, build_balanced_set, update_buffer

train, _ = load_corpus("digits")
buf = ReplayBuffer(budget=40, seed=0)

# %%
for pair in ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9)):
    part = train.of_classes(pair)
    x, y = build_balanced_set(buf, part.images, part.labels, seed=0)
    print(f"classes {pair}: balanced set {np.bincount(y).tolist()}")
    buf = update_buffer(buf, part.images, part.labels, part.ids)
    print(f"  stored after update: {buf.counts()}  total {len(buf)}")

# %%
# 40 slots over 10 classes gives exactly 4 each; with 6 classes the two spare
# slots went to the lowest ids.
