"""Frame alignment, flow masking and sequence-level augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

OUT_H, OUT_W = 64, 44
CENTER_COL = OUT_W // 2


def _as_chw(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim == 2:
        return frame[None]
    if frame.ndim == 3:
        return frame
    raise ValueError(f"expected [H, W] or [C, H, W], got {frame.shape}")


def _silhouette_2d(sil: np.ndarray) -> np.ndarray:
    sil = np.asarray(sil)
    if sil.ndim == 3 and sil.shape[0] == 1:
        sil = sil[0]
    if sil.ndim != 2:
        raise ValueError(f"silhouette must be [H, W] or [1, H, W], got {sil.shape}")
    return sil > 0


@dataclass(frozen=True)
class AlignTransform:
    """Maps output pixel (r, c) to source pixel
    ``(top + round(r * k), round(cx + (c - 22) * k))`` with ``k = (h - 1) / 63``."""

    top: int
    height: int
    cx: float

    @property
    def step(self) -> float:
        return (self.height - 1) / (OUT_H - 1)

    def source_indices(self) -> tuple[np.ndarray, np.ndarray]:
        k = self.step
        rows = self.top + np.floor(np.arange(OUT_H) * k + 0.5).astype(int)
        cols = np.floor(self.cx + (np.arange(OUT_W) - CENTER_COL) * k + 0.5).astype(int)
        return rows, cols


def alignment_from_silhouette(sil: np.ndarray) -> AlignTransform:
    mask = _silhouette_2d(sil)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise ValueError("silhouette has no foreground pixels")
    top, bottom = int(rows[0]), int(rows[-1])
    cx = float(np.nonzero(mask)[1].mean())
    return AlignTransform(top, bottom - top + 1, cx)


def apply_alignment(frame: np.ndarray, transform: AlignTransform) -> np.ndarray:
    """Nearest-neighbour resample of a [C, H, W] (or [H, W]) frame; columns
    falling outside the source are zero."""
    chw = _as_chw(frame)
    rows, cols = transform.source_indices()
    valid = (cols >= 0) & (cols < chw.shape[2])
    out = np.zeros((chw.shape[0], OUT_H, OUT_W), dtype=chw.dtype)
    out[:, :, valid] = chw[:, rows][:, :, cols[valid]]
    return out


def size_align(raw: np.ndarray, silhouette: np.ndarray) -> np.ndarray:
    """Crop to the silhouette's vertical extent, scale to 64 rows and centre
    its horizontal centre of gravity at column 22 of a 44-wide frame.

    The transform comes from ``silhouette`` so every modality of a frame stays
    registered.  Returns [C, 64, 44].
    """
    return apply_alignment(raw, alignment_from_silhouette(silhouette))


def flow_mask_preprocess(flow_frame: np.ndarray, silhouette: np.ndarray) -> np.ndarray:
    """Zero every channel of ``flow_frame`` [3, H, W] where the silhouette is background."""
    flow = _as_chw(flow_frame)
    mask = _silhouette_2d(silhouette)
    if mask.shape != flow.shape[1:]:
        raise ValueError(f"flow {flow.shape[1:]} and silhouette {mask.shape} differ in size")
    return flow * mask[None].astype(flow.dtype)


@dataclass(frozen=True)
class AugmentPolicy:
    """Per-sequence spatial augmentation: rotation about the image centre,
    optional horizontal flip (never with flow, whose dx channel it would
    corrupt)."""

    max_rotation: float = 10.0
    flip_prob: float = 0.0

    def effective_flip_prob(self, modalities) -> float:
        return 0.0 if "flow" in modalities else self.flip_prob

    def draw(self, rng: np.random.Generator, modalities) -> dict:
        angle = float(rng.uniform(-self.max_rotation, self.max_rotation)) if self.max_rotation > 0 else 0.0
        flip = bool(rng.random() < self.effective_flip_prob(modalities))
        return {"angle": angle, "flip": flip}


def _rotate(frames: np.ndarray, angle: float) -> np.ndarray:
    if angle == 0.0:
        return frames
    return ndimage.rotate(frames, angle, axes=(-1, -2), reshape=False, order=0, mode="constant", cval=0)


def augment(frames: dict, policy: AugmentPolicy, rng: np.random.Generator) -> tuple[dict, dict]:
    """Apply one randomly drawn transform identically to every frame of every
    modality.  ``frames`` maps modality to [T, C, H, W]; returns (frames, params)."""
    params = policy.draw(rng, frames.keys())
    out = {}
    for m, x in frames.items():
        y = _rotate(x, params["angle"])
        if params["flip"]:
            y = y[..., ::-1]
        out[m] = np.ascontiguousarray(y)
    return out, params
