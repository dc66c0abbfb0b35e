"""Pair matching with a multiplicative interaction gate and spatial recurrent context.

A small numpy reverse-mode autodiff core drives the whole network: convolutional
encoders, the gate, four-direction IRNN context, the residual embedding head and
the binomial deviance loss.
"""
from .context import CONTEXT_MODELS, Direction, IRNNLayerParams, SPPConfig, build_context, spp_pool, stacked_irnn_pool
from .data import Dataset, PairBatch, Sample, augment_flip, augment_shift, load_dataset, sample_batch
from .encoder import ConvSpec, Encoder, EncoderConfig, encode
from .evaluation import ScoreMatrix, cmc_single_shot, mean_average_precision
from .formats import BadMagicError, FormatError, TruncatedFileError, VersionMismatchError
from .gate import ActivationMap, MIGateParams, mi_backward_closed_form, mi_forward
from .gradcheck import GradCheckReport, grad_check
from .head import (BatchConstructionError, DegenerateEmbeddingWarning, LossConfig, Supervision,
                   binomial_deviance_loss, cosine_similarity_matrix)
from .model import MatchingModel, ModelConfig, pair_similarity
from .synthetic import SyntheticSpec, generate_pair_dataset, make_pair_dataset
from .tensor import NonFiniteError, ShapeError, Tensor, no_grad, precision, set_precision
from .train import TrainConfig, TrainingDiverged, load_model

__version__ = "0.1.0"
