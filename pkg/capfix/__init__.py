"""capfix - false-repetition correction for caption corpora."""

__version__ = "0.1.0"
