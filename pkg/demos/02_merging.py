"""Merging adapter weights: a running mean that never needs the old sets."""
# %%
import numpy as np

from adaptmerge.merging import MergeState, freeze_merged, merge_batch, merge_incremental
from adaptmerge.model import Backbone

backbone = Backbone(1, (16, 32), seed=0).freeze()
rng = np.random.default_rng(0)


def trained_like(scale):
    # stand-in for the weights adapter tuning would produce
    return [{k: (scale * rng.standard_normal(v.shape)).astype(np.float32) for k, v in a.state().items()}
            for a in backbone.make_adapters()]


sets = [trained_like(0.1 * (t + 1)) for t in range(5)]

# %%
state = MergeState()
for t, w in enumerate(sets, start=1):
    state = merge_incremental(state, w)
    gap = max(np.abs(state.merged[j][k] - merge_batch(sets[:t])[j][k]).max()
              for j in range(len(w)) for k in w[j])
    print(f"after task {t}: running mean vs batch mean, max abs diff {gap:.1e}")

# %%
# The merged set is loaded into frozen adapters; one forward pass uses them all.
frozen = freeze_merged(state, backbone.make_adapters())
x = rng.standard_normal((4, 1, 16, 16)).astype(np.float32)
from adaptmerge.numerics import Tensor, no_grad

with no_grad():
    before = backbone.block_executions
    feats = backbone(Tensor(x), frozen)
print("feature shape", feats.shape, "blocks run", backbone.block_executions - before)
