"""
A synthetic subject with a planted ROI
======================================

Generate one 20x20x20 subject, look at where its informative voxels are,
and check that z-scoring uses only the training samples.
"""
import numpy as np

from troi.synth import SyntheticSubjectSpec, generate_subject, zscore

spec = SyntheticSubjectSpec(seed=3)
subject = generate_subject(spec)
print("grid", subject.dims, "voxels", subject.n_voxels)
print("ROI voxels", subject.true_roi.nonzero_count())
print("train / test samples", len(subject.train), len(subject.test))

# Only ROI voxels carry the embedding, so on raw data their variance stands
# out: ROI voxels hold signal plus noise, the background noise alone.
var = subject.fmri[subject.train].var(axis=0)
roi = subject.true_roi.bits.ravel().astype(bool)
print("mean variance in ROI %.2f, outside %.2f" % (var[roi].mean(), var[~roi].mean()))
top = np.argsort(var)[::-1][:roi.sum()]
print("share of the top-variance voxels inside the ROI: %.2f" % roi[top].mean())

# The model only sees z-scored data: zero mean and unit variance per voxel on
# the training block. Variance no longer tells ROI from background; what is
# left is the shared structure across ROI voxels.
z = zscore(subject)
train = z.fmri[z.train]
print("train mean %.1e, train std %.3f" % (np.abs(train.mean(axis=0)).max(), train.std(axis=0).mean()))
zvar = train.var(axis=0)
print("z-scored variance in ROI %.3f, outside %.3f" % (zvar[roi].mean(), zvar[~roi].mean()))
