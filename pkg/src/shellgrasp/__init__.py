"""Enveloping grasp affordance detection in point clouds."""
__version__ = "0.1.0"
