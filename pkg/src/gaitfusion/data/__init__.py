"""Synthetic gait data, on-disk ingestion and preprocessing."""

from .dataset import BatchItem, DatasetManifest, GaitDataset, SequenceSample, collate, pk_sample
from .imageio import read_pnm, write_pnm
from .preprocess import AugmentPolicy, augment, flow_mask_preprocess, size_align
from .synth import SynthSpec, synth_generate

__all__ = [
    "AugmentPolicy", "BatchItem", "DatasetManifest", "GaitDataset", "SequenceSample", "SynthSpec",
    "augment", "collate", "flow_mask_preprocess", "pk_sample", "read_pnm", "size_align",
    "synth_generate", "write_pnm",
]
