"""Desk-scale multi-task learning lab.

One shared encoder, one decoder per task, tasks sampled from a categorical
distribution each iteration, Adam updates, panoptic-quality and accuracy
evaluation, and gradient-conflict diagnostics over the encoder gradients.
"""

__version__ = "0.1.0"
