"""avfuse: audio captioning with adaptive audio-visual attention fusion.

A desk-scale multimodal sequence-to-sequence toolkit: a Transformer
encoder-decoder captioner whose decoder fuses audio and visual cross-attention
through a confidence-gated, hard-thresholded attention block, plus the
baseline fusion variants, training, beam-search decoding, caption metrics,
and a synthetic ambiguous-sound task for end-to-end verification.
"""

__version__ = "0.1.0"
