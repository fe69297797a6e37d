"""Post-hoc OOD scoring, failure-detection evaluation and dual-gate filtering."""

__version__ = "0.1.0"
