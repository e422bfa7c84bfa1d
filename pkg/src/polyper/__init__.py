"""Boundary-sensitive polyp segmentation at desk scale."""
from .bsa import AttentionProbe, BoundarySensitiveAttention, bsa_forward, gather, scatter_add
from .config import RunConfig, parse_mode
from .decoder import PBEModel, Polyper, PolyperOutput, load_checkpoint, save_checkpoint
from .encoder import PyramidFeatures, ToyEncoder
from .metrics import EvalReport, dice_iou, evaluate
from .region_ops import RegionPartition, dilate, erode, separate_regions

__version__ = "0.1.0"
