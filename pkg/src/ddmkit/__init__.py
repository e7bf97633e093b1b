"""Dialect density estimation toolkit.

Estimates the dialect density of short speech utterances from six feature
families (ASR character statistics, character-LM surprisal, projected speaker
embeddings, projected prosody, and an ingested paralinguistic table), trains
boosted regression trees per feature set, and explains predictions with exact
per-feature Shapley attributions.
"""

__version__ = "0.1.0"
