"""Joint intent classification and store-location NER on a shared encoder."""

__version__ = "0.1.0"
