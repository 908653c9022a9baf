"""Displacement-map head modelling: registration, UV atlases, linear shape model, animation and metrics."""
