"""Gait analysis from 3D keypoint sequences.

Pipeline: canonical pose normalization, a transformer that predicts
kinematics and quadrature gait phase, an EKF/RTS phase smoother that finds
foot contact and foot off events, and per-cycle spatiotemporal parameters.
A synthetic gait generator serves as ground truth, and a camera/time-offset
calibrator registers video keypoints against motion capture.
"""

from .core import EVENT_TYPES, JOINT_NAMES, KIN_CHANNELS, EventAnnotations, Trial, load_trial, save_trial

__all__ = ["EVENT_TYPES", "JOINT_NAMES", "KIN_CHANNELS", "EventAnnotations", "Trial", "load_trial", "save_trial"]
__version__ = "0.1.0"
