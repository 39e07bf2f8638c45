"""N-best rescoring and rewriting toolkit.

Synthesizes noisy ASR-style N-best lists, trains transformer rescorers
(plain rescorer and rescore-attention variants), trains a Katz back-off
4-gram baseline, and combines per-hypothesis signals through learned
linear interpolation.
"""

__version__ = "0.1.0"
