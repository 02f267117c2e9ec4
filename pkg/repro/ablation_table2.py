"""Ablation table on planted-ROI subjects, averaged over seeds.

Rows: full method, without pretraining, without the low-pass filter, and
fine-tuning instead of rewinding. Usage:

    python repro/ablation_table2.py [--seeds 0 1 2] [--snr 2.0] [--pretrain-epochs 30]
"""
import argparse
import dataclasses

import numpy as np

from troi.config import default_subjects
from troi.eval import evaluate
from troi.nn import init_params
from troi.synth import generate_subject, zscore
from troi.trainer import (Schedule, Stage1Config, TrainConfig, finetune_continuation, pretrain,
                          stage1_sparse_mask, stage2_rewind)

ROWS = ("full", "w/o pretraining", "w/o low-pass filter", "w/o rewinding")


def one_seed(seed, snr, pretrain_epochs, budget):
    specs = [dataclasses.replace(s, snr=snr) for s in default_subjects(5, seed=seed)]
    subjects = [zscore(generate_subject(s)) for s in specs]
    target = subjects[-1]
    pre_cfg = TrainConfig(schedule=Schedule(total_epochs=pretrain_epochs), seed=seed)
    s2_cfg = TrainConfig(schedule=Schedule(total_epochs=150), seed=seed)
    bundle, _ = pretrain(subjects[:-1], pre_cfg)
    scratch = init_params(seed, {}, pre_cfg.dims)

    def metrics(trained, mask):
        m = evaluate(trained, target, mask, max_candidates=100, seed=seed)
        return [m.image_retrieval_acc, m.brain_retrieval_acc, m.two_way_ident, m.mask_iou]

    out = {}
    for row, start, use_filter in (("full", bundle, True), ("w/o pretraining", scratch, True),
                                   ("w/o low-pass filter", bundle, False)):
        res = stage1_sparse_mask(start, target, Stage1Config(budget=budget, use_filter=use_filter), pre_cfg)
        out[row] = metrics(stage2_rewind(start, res.mask, target, s2_cfg)[0], res.mask)
        if row == "full":
            out["w/o rewinding"] = metrics(finetune_continuation(res, res.mask, target, s2_cfg)[0], res.mask)
    return out


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--snr", type=float, default=2.0)
    p.add_argument("--pretrain-epochs", type=int, default=30)
    p.add_argument("--budget", type=int, default=600)
    args = p.parse_args()
    per_seed = [one_seed(s, args.snr, args.pretrain_epochs, args.budget) for s in args.seeds]
    print(f"snr {args.snr}, budget {args.budget}, seeds {args.seeds}, 100 test candidates")
    print(f"{'':<22}{'image':>8}{'brain':>8}{'two-way':>9}{'IoU':>7}")
    for row in ROWS:
        mean = np.mean([r[row] for r in per_seed], axis=0)
        print(f"{row:<22}" + "".join(f"{v:>8.3f}" if i < 2 else f"{v:>9.3f}" if i == 2 else f"{v:>7.3f}"
                                     for i, v in enumerate(mean)))


if __name__ == "__main__":
    main()
