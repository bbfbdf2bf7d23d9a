"""Unfitted discontinuous Galerkin EEG forward simulation on structured grids."""
