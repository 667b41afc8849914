"""Forget-free continual learning with winning subnetworks and soft subnetworks."""

__version__ = "0.1.0"

from .codec import EncodedTicketBundle, capacity, decode_masks, encode_masks, huffman_decode, huffman_encode
from .estimators import SoftNetFSCIL, WSNClassifier
from .fscil import FSCILConfig, run_fscil
from .masks import AccumMask, SoftMask, TaskMask, accumulate, make_soft_mask, topc_mask
from .nn import ScoredParamStore, init_store
from .til import AccuracyMatrix, TILRunConfig, run_sequence

__all__ = [
    "AccumMask",
    "AccuracyMatrix",
    "EncodedTicketBundle",
    "FSCILConfig",
    "ScoredParamStore",
    "SoftMask",
    "SoftNetFSCIL",
    "TILRunConfig",
    "TaskMask",
    "WSNClassifier",
    "accumulate",
    "capacity",
    "decode_masks",
    "encode_masks",
    "huffman_decode",
    "huffman_encode",
    "init_store",
    "make_soft_mask",
    "run_fscil",
    "run_sequence",
    "topc_mask",
]
