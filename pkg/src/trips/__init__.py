"""Exemplar-free domain-generalized class-incremental learning with triplet and prototype rehearsal."""

__version__ = "0.1.0"
