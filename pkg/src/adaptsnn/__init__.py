"""Framework-free spiking network training with adaptive thresholds and
threshold-driven surrogate-gradient widths."""

__version__ = "0.1.0"
