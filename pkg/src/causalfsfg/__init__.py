"""Few-shot fine-grained classification with interventional multi-scale encoding
and masked feature reconstruction, plus an exact discrete frontdoor oracle."""

__version__ = "0.1.0"
