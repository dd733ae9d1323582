"""Desk-scale non-autoregressive code-switching ASR engine.

Pipeline: a transformer encoder with a CTC head over pinyin-mixed units,
a single-layer pinyin-to-character decoder, and a conditional masked LM
decoder that iteratively fills low-confidence positions. Training adds
word-embedding label smoothing and a projection-matrix cosine regularizer.
"""

__version__ = "0.1.0"
