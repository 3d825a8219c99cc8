"""Cross-resolution re-identification at desk scale.

A small identity-retrieval pipeline: an encoder trained with multi-scale
feature adversaries to be resolution-invariant, a decoder that recovers
high-resolution detail, a second encoder over the recovered images, and a
joint embedding used for nearest-neighbor retrieval.  Everything runs on a
procedurally generated toy identity dataset so the whole system is
trainable and verifiable on one CPU.
"""

__version__ = "0.1.0"
