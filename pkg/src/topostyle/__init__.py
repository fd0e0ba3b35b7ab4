"""Text-guided stylized topology optimization on a hash-encoded neural field."""

__version__ = "0.1.0"
