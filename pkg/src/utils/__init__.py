"""Utility functions for the recommender command line."""

from .validators import (
    validate_input_file,
    validate_output_directory,
    validate_file_path,
    validate_k_values,
    validate_intensities,
    validate_seed_count
)
