"""Profiling-guided, LLM-assisted code optimization pipeline.

Parses collapsed-stack profiles, maps hotspots to source units, asks a
language model backend (remote or scripted replay) for pattern-guided
rewrites, gates each candidate on build/test correctness, measures it, and
keeps the best variant by a weighted metric objective.
"""

__version__ = "0.1.0"
