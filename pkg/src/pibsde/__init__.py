"""Utility maximization under partial information via backward SDEs."""
