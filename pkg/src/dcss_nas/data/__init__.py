"""Synthetic segmentation data, augmentation, storage and mIoU evaluation."""
