"""Synthetic scenes, rendering, ground truth and the evaluation methodology."""
