"""
On-disk storage for datasets, checkpoints and feature banks.

Everything is written in the binary tensor container (container.py) next to a
key=value manifest, so any artifact can be checksummed and regenerated.
"""
