"""Adversarial playback perturbation against vibration side-channel eavesdropping."""

__version__ = "0.1.0"
