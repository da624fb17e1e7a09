"""Sparse-view radiance field training with geometric, semantic, and
photometric guidance, plus the analytic-scene testbed used to verify it."""

__version__ = "0.1.0"
