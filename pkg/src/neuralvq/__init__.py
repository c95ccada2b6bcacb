"""Residual vector quantization with neural codebooks.

Quantizes vectors into short code sequences with per-step networks that
adapt each codebook to the reconstruction so far, encodes with candidate
pre-selection plus beam search, trains on a small built-in autodiff engine,
and serves nearest-neighbor queries through an IVF index with additive and
pairwise table decoders for cheap shortlisting.
"""

__version__ = "0.1.0"

from .baseline import KmeansResult, ProductQuantizer, ResidualQuantizer, lloyd_kmeans
from .data import NormStats, apply_norm, fit_norm, read_vecs, split, synth_gmm, write_vecs
from .decoders import (
    AdditiveDecoder,
    IvfCentroidCodes,
    PairwiseDecoder,
    fit_additive_lstsq,
    fit_additive_sequential,
    fit_pairs_fixed,
    pair_index,
    quantize_ivf_centroids,
    select_pairs_greedy,
)
from .errors import ConfigError, DataFormatError, NeuralVqError, NumericalError
from .model import ModelConfig, NeuralRQ, StepNet
from .search import IvfIndex, SearchParams, compute_groundtruth, eval_mse, eval_recall
from .serialize import (
    load_index,
    load_model,
    read_codes,
    save_index,
    save_model,
    write_codes,
)
from .training import init_from_rq, train

__all__ = [
    "AdditiveDecoder",
    "ConfigError",
    "DataFormatError",
    "IvfCentroidCodes",
    "IvfIndex",
    "KmeansResult",
    "ModelConfig",
    "NeuralRQ",
    "NeuralVqError",
    "NormStats",
    "NumericalError",
    "PairwiseDecoder",
    "ProductQuantizer",
    "ResidualQuantizer",
    "SearchParams",
    "StepNet",
    "apply_norm",
    "compute_groundtruth",
    "eval_mse",
    "eval_recall",
    "fit_additive_lstsq",
    "fit_additive_sequential",
    "fit_norm",
    "fit_pairs_fixed",
    "init_from_rq",
    "lloyd_kmeans",
    "load_index",
    "load_model",
    "pair_index",
    "quantize_ivf_centroids",
    "read_codes",
    "read_vecs",
    "save_index",
    "save_model",
    "select_pairs_greedy",
    "split",
    "synth_gmm",
    "train",
    "write_codes",
    "write_vecs",
]
