"""Batch evaluation harness for text-only nutrient estimation.

Pipeline: ingest dietary-recall CSVs, render food-quantity strings into a
ten-shot chain-of-thought prompt, query a chat-completion backend (or a
deterministic nutrient-table oracle), parse the strict six-value replies,
and validate predictions with error metrics, paired t-tests, Lin's
concordance, and Bland-Altman agreement plots.
"""

__version__ = "0.1.0"
