"""Random-access neural texture compression with a convolutional encoder and quantized grid pairs."""

__version__ = "0.1.0"
