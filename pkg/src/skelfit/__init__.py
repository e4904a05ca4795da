"""Skeletal representation fitting and interior geometric features.

The package fits a folded skeletal grid (spine, veins, fold, radial
spokes) to a closed genus-0 triangle mesh, derives alignment-free
interior features from fitted frames along the spoke field, and
evaluates shape representations on synthetic two-class populations.
"""

__version__ = "0.1.0"
