"""Gaussian-process paired-comparison ratings with sparse Laplace inference."""

from .data import MatchDataset, MatchRecord, build_design, parse_match_csv, read_match_csv, walk_forward_split
from .evaluation import accuracy, log_loss, rating_table, to_elo_scale, walk_forward_evaluate
from .kernels import RBF, ArdRbf, Brownian, Matern12, Matern32, build_block_prior, experiment_kernel
from .laplace import approx_lml, find_mode, fit_laplace, predict_match, predict_skill

__version__ = "0.1.0"

__all__ = [
    "MatchDataset",
    "MatchRecord",
    "build_design",
    "parse_match_csv",
    "read_match_csv",
    "walk_forward_split",
    "accuracy",
    "log_loss",
    "rating_table",
    "to_elo_scale",
    "walk_forward_evaluate",
    "RBF",
    "ArdRbf",
    "Brownian",
    "Matern12",
    "Matern32",
    "build_block_prior",
    "experiment_kernel",
    "approx_lml",
    "find_mode",
    "fit_laplace",
    "predict_match",
    "predict_skill",
]
