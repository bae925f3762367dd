"""Next-prescription sequence modeling from longitudinal EHR event logs."""

__version__ = "0.1.0"
