"""Vulnerability detection on code property graphs with distilled gated GNNs
and language-model node features."""

__version__ = "0.1.0"
