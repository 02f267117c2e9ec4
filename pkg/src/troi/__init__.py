"""Trainable voxel masks for cross-subject decoding on synthetic voxel grids."""
