"""Planar primitive reconstruction package."""
