"""Desk-scale simulator of wafer-scale EAM molecular dynamics."""

from .eam_potential import EamTables, load_setfl
from .system_builder import AtomSystem, SlabSpec

__all__ = ["AtomSystem", "EamTables", "SlabSpec", "load_setfl"]
