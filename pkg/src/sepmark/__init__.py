"""Separable image watermarking toolkit.

One encoder embeds a bit message into an image. Two independently trained
decoders read it back: the tracer survives every distortion in the noise
pool, the detector survives only the benign ones. Comparing the two decoder
outputs tells apart untouched-but-reprocessed images from manipulated ones
while the tracer still names the source.
"""

__version__ = "0.1.0"
