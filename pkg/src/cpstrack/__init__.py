"""Open-world video object tracking over dense patch embeddings.

Objects are followed from frame to frame through mutual nearest-neighbour
patch pairs against a bounded memory of labelled patches; a prompted
segmenter turns the paired points into masks while carrying a per-object
state that keeps the mask granularity fixed.
"""
from .cps_memory import MemoryBank, MemoryEntry, default_capacity
from .cycle_prop import CyclePair, PositionPrompt, centrality, mutual_pairs, propagate, select_prompt
from .errors import CpsTrackError
from .evalkit import EvalReport, ar_at_n, cycle_consistency, evaluate, id_switches, st_iou
from .segmenter import MaskProposal, ObjectState, ToySegmenter, grid_detect, mask_iou, mask_nms
from .sim_kernel import cosine_similarity_matrix, row_argmax, col_argmax
from .synth import ObjectSpec, SynthSpec, SyntheticSequence, generate
from .tensor_io import (
    EmbeddingGrid,
    LabelMask,
    SequenceManifest,
    load_sequence,
    read_embedding_grid,
    read_label_mask,
    read_manifest,
    save_sequence,
    write_embedding_grid,
    write_label_mask,
)
from .tracker import SequenceResult, TrackerConfig, Tracklet, init_sequence, run, run_manifest

__version__ = "0.1.0"
