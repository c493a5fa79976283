"""Blockwise jackknife confidence bands for recurrent sequence models."""
from .dataset import (BlockIndex, NoiseProfile, SequenceDataset, WeightVector, delete_block,
                      delete_interval_block, delete_sequence_block, generate_synthetic, standard_weights)
from .evaluation import CoverageReport, audit_precision, coverage, mean_width, rmse
from .influence import InfluenceResult, InverseHvpConfig, blockwise_influence, exact_retrain, inverse_hvp
from .intervals import ConfidenceBand, build_band, build_bands, collect_lobo_residuals, quantile_lower, quantile_upper
from .model import RNN, LinearModel, RnnParams, TrainConfig, train
from .numerics import RngStream
from .pipeline import JackknifeConfig, run_jackknife

__version__ = "0.1.0"
