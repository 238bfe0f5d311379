"""Sliced Wasserstein pooling, shared media resampling and the retrieval objective at desk scale."""

from .losses import LossConfig, SimilarityBatch, diversity_loss, hardneg_weights, info_nce, phi, total_loss, triplet_loss
from .resampler import CrossAttentionBlock, LatentResampler, SharedMediaResampler, video_trilinear
from .swpool import ASWPool, SlicedPool, brute_force_w2, monge_coupling_1d, pswe_embed, stm_select

__version__ = "0.1.0"
