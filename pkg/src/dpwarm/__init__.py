"""Differentially private warm-start optimization."""
