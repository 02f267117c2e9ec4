"""
Pretrain, select voxels, retrain
================================

The full method on the default 20^3 layout: four subjects train the shared
networks, then a fifth subject gets a sparse voxel mask (stage 1) and a
fresh input layer trained on just those voxels (stage 2).

Runs in under a minute on one core with the shortened pretraining below.
"""
import time

from troi.config import default_subjects
from troi.eval import evaluate
from troi.grid import mask_overlap
from troi.synth import generate_subject, zscore
from troi.trainer import Schedule, Stage1Config, TrainConfig, pretrain, stage1_sparse_mask, stage2_rewind

specs = default_subjects(5, seed=0)
subjects = [zscore(generate_subject(s)) for s in specs]
target = subjects[-1]

t0 = time.perf_counter()
cfg = TrainConfig(schedule=Schedule(total_epochs=30))
bundle, report = pretrain(subjects[:-1], cfg)
print("pretrain: total loss %.3f -> %.3f (%.0fs)" % (report.records[0]["total"], report.records[-1]["total"],
                                                      time.perf_counter() - t0))

# Stage 1: L1 pressure on the mask weights, hard threshold, low-pass filter,
# binarize; repeat until the binary mask fits the budget.
t0 = time.perf_counter()
res = stage1_sparse_mask(bundle, target, Stage1Config(budget=600), cfg)
iou, prec, rec = mask_overlap(res.mask, target.true_roi)
print("stage 1: %d iterations, %d voxels, IoU %.3f precision %.3f recall %.3f (%.0fs)"
      % (res.iterations, res.mask.nonzero_count(), iou, prec, rec, time.perf_counter() - t0))
print("  binary mask size per iteration:", [r["binary_nnz"] for r in res.report.records])

# Stage 2: gather the selected voxels, re-initialize the input layer, and
# restart the learning-rate schedule from the pretrained shared weights.
t0 = time.perf_counter()
trained, _ = stage2_rewind(bundle, res.mask, target, TrainConfig(schedule=Schedule(total_epochs=150)))
metrics = evaluate(trained, target, res.mask, max_candidates=100)
print("stage 2 (%.0fs)" % (time.perf_counter() - t0))
print(metrics.table())
