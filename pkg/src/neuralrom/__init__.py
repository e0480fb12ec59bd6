"""Discretization-agnostic linear reduced-order modeling for elastic solids.

The pipeline: full-space FEM trajectories (`full_sim`) become sampled training
sets (`dataset`); a continuous displacement basis and a set encoder are
trained jointly (`networks`, `trainer`); online dynamics then run in the
latent space over a swappable cubature mesh (`reduced_sim`), driven from the
command line (`cli`) or an interactive session server (`service`).
"""

__version__ = "0.1.0"
