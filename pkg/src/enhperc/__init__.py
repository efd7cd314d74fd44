"""Site percolation with local enhancements on planar lattices."""
from .lattice import Adjacency, Boundary, Kind, LatticeModel, Window
from .config import SiteField, sample_field, sample_activation
from .enhance import EnhancementRule, apply_enhancement, full_enhancement, get_rule, check_essential
from .cluster import cardy_F, crossing_probability, simulate_observables
from .expcli import ExperimentSpec, ResultRecord, run, report

__all__ = [
    "Adjacency", "Boundary", "Kind", "LatticeModel", "Window",
    "SiteField", "sample_field", "sample_activation",
    "EnhancementRule", "apply_enhancement", "full_enhancement", "get_rule", "check_essential",
    "cardy_F", "crossing_probability", "simulate_observables",
    "ExperimentSpec", "ResultRecord", "run", "report",
]
