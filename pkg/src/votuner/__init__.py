"""Sparse visual-odometry frontend with online learned parameter tuning.

Subpackages cover the tracking frontend, a procedural simulator with exact
ground-truth optical flow, the image-space reward stack with its compute-cost
model, policy networks, and the PPO / bandit / PSO training machinery.
"""

__version__ = "0.1.0"
