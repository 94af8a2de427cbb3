"""Semi-supervised semantic segmentation with dual-branch semantic alignment:
a frozen patch encoder feeds a DeepLab-style decoder plus prototype and
prompt-text scoring branches whose fused logits drive threshold-gated
pseudo-labels for weak-to-strong consistency training."""

__version__ = "0.1.0"
