"""Reconstruction and motion metrics."""
