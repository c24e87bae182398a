"""Low-pass frequency filtering plus gradient rectification for calibration under shift."""

__version__ = "0.1.0"
