"""
Looking at a learned mask
=========================

Train a stage-1 mask with and without the low-pass filter and write both,
plus the true ROI, as one PGM image per z-slice. The filtered mask forms a
compact blob; the unfiltered one scatters.
"""
import sys
from pathlib import Path

from troi.config import default_subjects
from troi.grid import export_pgm_slices, mask_overlap
from troi.synth import generate_subject, zscore
from troi.trainer import Schedule, Stage1Config, TrainConfig, pretrain, stage1_sparse_mask

out = Path(sys.argv[1] if len(sys.argv) > 1 else "mask_slices")
subjects = [zscore(generate_subject(s)) for s in default_subjects(5, seed=1)]
target = subjects[-1]
cfg = TrainConfig(schedule=Schedule(total_epochs=20), seed=1)
bundle, _ = pretrain(subjects[:-1], cfg)

export_pgm_slices(target.true_roi, out / "true_roi")
for use_filter in (True, False):
    res = stage1_sparse_mask(bundle, target, Stage1Config(budget=600, use_filter=use_filter), cfg)
    name = "filtered" if use_filter else "unfiltered"
    export_pgm_slices(res.mask, out / name)
    iou, prec, rec = mask_overlap(res.mask, target.true_roi)
    print(f"{name:<10} voxels {res.mask.nonzero_count()}  IoU {iou:.3f}  precision {prec:.3f}  recall {rec:.3f}")

# middle slice as text: '#' selected and in the ROI, '+' selected only, '.' missed ROI
z = target.dims[2] // 2
roi = target.true_roi.bits[:, :, z]
sel = res.mask.bits[:, :, z]
print(f"unfiltered mask, slice z={z}")
for row_roi, row_sel in zip(roi, sel):
    print("".join("#" if r and s else "+" if s else "." if r else " " for r, s in zip(row_roi, row_sel)))
print("slices written to", out)
