"""Keyword-first retrieval-augmented translation toolkit for low-resource
languages, with an offline evaluation stack (BLEU, ROUGE-L, BERTScore,
normalized human scores)."""

__version__ = "0.1.0"
