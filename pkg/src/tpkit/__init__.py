"""Toolkit for sampling and verifying statistics of reactive trajectories.

A diffusion wanders between two metastable regions A and B.  The pieces of
its path that lead directly from A to B (transition paths) have their own
statistics: a rate, exit and entrance laws on the region boundaries, a
spatial density, and a probability current.  All of them are computable two
ways -- empirically from long trajectories, and analytically from the
committor functions -- and this package implements both routes plus a direct
sampler for the conditioned process, so that every identity can be checked
numerically.
"""

from tpkit.model import Box, DiffusionModel, Region, ball_region, build_model, invariant_density
from tpkit.grid import Grid, NodeClass, ScalarField, VectorField, build_grid, gradient, quadrature, boundary_normal_flux
from tpkit.integrate import Trajectory, simulate, simulate_until, simulate_ensemble
from tpkit.pde import (
    discretize_generator,
    solve_committor,
    solve_backward_committor,
    solve_mean_hitting_time,
    solve_tpp_mean_hitting,
    committor_mc_estimate,
)
from tpkit.measures import BoundaryMeasure
from tpkit.reactive import (
    ReactiveSegment,
    segment_reactive,
    empirical_boundary_distribution,
    reaction_statistics,
    pooled_reaction_statistics,
    empirical_reactive_density,
    entrance_chain,
)
from tpkit.tpp import TppPath, tpp_drift, sample_tpp, sample_exit_distribution, tpp_ensemble
from tpkit.analysis import (
    TptAnalytics,
    exit_entrance_measures,
    rate_quadrature,
    time_quadratures,
    reactive_density_field,
    current_field,
    divergence_check,
    surface_flux,
    streamline_map,
    compute_analytics,
)
from tpkit.config import ExperimentConfig, ConfigError, load_config
from tpkit.pipeline import run_pipeline

__version__ = "0.1.0"
