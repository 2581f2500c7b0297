"""Report generator: multimodal encoder, copy-augmented decoder, training and decoding."""
