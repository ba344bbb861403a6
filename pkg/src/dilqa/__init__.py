"""Delayed-interaction transformer reader and open-domain QA pipeline.

The reader runs the first k encoder blocks on question and paragraph
independently (so paragraph states can be precomputed and cached) and the
remaining l - k blocks on their concatenation. Around it: a word-level
tokenizer, an Okapi BM25 retriever, a binary paragraph-state cache, span
training on synthetic tasks, and a MAC-exact cost model with benchmarks.
"""

__version__ = "0.1.0"

from .encoder import ModelConfig
from .tensor import MacCounter

__all__ = ["ModelConfig", "MacCounter", "__version__"]
