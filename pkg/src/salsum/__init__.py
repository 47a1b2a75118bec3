"""Abstractive sentence summarization with word-salience attention."""

__version__ = "0.1.0"
