"""Meta visual prompt tuning: prompt-only few-shot adaptation of a frozen ViT."""

__version__ = "0.1.0"
