"""Offline evaluation and optimization with skippy Bellman operators."""
