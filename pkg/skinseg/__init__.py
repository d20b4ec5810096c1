"""Skin segmentation with a color classifier, lightweight U-Nets and their ensembles."""

from __future__ import annotations

__version__ = "0.1.0"
