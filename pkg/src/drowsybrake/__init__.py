"""Drowsiness-aware emergency braking: ECG/HRV drowsiness detection and
deep Q-learning brake control in a longitudinal car-following simulator."""

__version__ = "0.1.0"
