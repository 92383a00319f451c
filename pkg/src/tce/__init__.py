"""Temporal convolutional encoder for text-line recognition.

A small, self-contained stack: a dense-tensor autodiff core, channel and
spatial attention, a residual CNN feature extractor feeding a dilated
causal temporal convolution stack, CTC loss with an exhaustive alignment
oracle, AdaDelta training on a procedural digit-string corpus, and a CLI
exposing generation, training, evaluation, and verification probes.
"""

__version__ = "0.1.0"
