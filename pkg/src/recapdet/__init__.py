"""Recaptured-document detection via forensic-similarity metric learning."""

__version__ = "0.1.0"
