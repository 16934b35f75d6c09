"""Extreme multi-label text classification with teacher knowledge.

Teacher knowledge is built from nearest-neighbour texts and a label
hierarchy, then fused with the text by a two-branch attention network.
"""

__version__ = "0.1.0"
