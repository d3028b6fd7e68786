"""Inference cost: one merged pass versus one pass per task."""
# %%
from adaptmerge.metrics import dynamic_inference_cost, flops_of, load_arch, shipped_arch

plain = flops_of(load_arch(shipped_arch("resnet18")), (3, 224, 224))
adapted = flops_of(load_arch(shipped_arch("resnet18_adapters")), (3, 224, 224))
print(f"resnet18            {plain.total_flops / 1e9:.3f} GFLOPs  {plain.total_params:,} params")
print(f"resnet18 + adapters {adapted.total_flops / 1e9:.3f} GFLOPs  {adapted.total_params:,} params")

# %%
# The adapters cost about 3% more per pass. A model that keeps one adapter set
# per task and runs each of them pays that pass once per task.
for t in (1, 4, 7, 10):
    multi = dynamic_inference_cost(adapted, t) / 1e9
    merged = dynamic_inference_cost(adapted, t, "merged") / 1e9
    print(f"t={t:>2}  per-task passes {multi:6.2f} G   merged {merged:.2f} G")

# %%
# Per-layer view of the small backbone used for the digit runs.
desk = flops_of(load_arch(shipped_arch("desk_backbone_adapters")), (1, 32, 32))
for row in desk.layers:
    if row.macs:
        print(f"{row.name:<14} {row.macs:>9,} MACs")
print(f"total {desk.total_macs:,}")
