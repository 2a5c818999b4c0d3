"""Rotation, plane and cuboid primitives shared by every stage."""
