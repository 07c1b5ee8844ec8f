"""Procedural walkers rendered as silhouette, parsing and flow frames.

Each identity is a capsule-and-disc figure with two shape parameters (torso
width, limb length) and three motion parameters (swing amplitude, stride
frequency, arm/leg phase lag).  Flow is rendered on a canonical body driven
only by the motion parameters, so it carries no shape information beyond
what masking by the silhouette later adds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .imageio import write_pnm

MODES = ("shape_only", "motion_only", "mixed")
PART_LABELS = {"head": 1, "torso": 2, "arm_l": 3, "arm_r": 4, "leg_l": 5, "leg_r": 6}
PARSING_LEVEL = 40  # gray level per part label; label 6 -> 240
MODALITY_FILES = {"sil": "pgm", "par": "pgm", "flow": "ppm"}
MANIFEST_NAME = "manifest.tsv"
MANIFEST_HEADER = ("identity", "sequence", "condition", "modality", "path")

HEAD_RADIUS = 4.0
TORSO_LENGTH = 18.0
FLOW_GAIN = 12.0  # encoded units per pixel of displacement
FLOW_MAG_GAIN = 20.0


@dataclass
class SynthSpec:
    num_ids: int = 4
    seqs_per_id: int = 4
    frames: int = 12
    torso_width: tuple = (6.0, 13.0)
    limb_length: tuple = (18.0, 28.0)
    swing_amplitude: tuple = (0.35, 0.45)
    stride_frequency: tuple = (0.05, 0.125)
    phase: tuple = (math.pi - 0.3, math.pi + 0.3)
    mode: str = "mixed"
    conditions: tuple = ("NM", "BG", "CL")
    height: int = 64
    width: int = 44

    RANGES = ("torso_width", "limb_length", "swing_amplitude", "stride_frequency", "phase")

    def validate(self) -> "SynthSpec":
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.num_ids < 1 or self.seqs_per_id < 1:
            raise ValueError("need at least one identity and one sequence")
        if self.frames < 2:
            raise ValueError("frames must be >= 2 (flow needs consecutive frames)")
        for name in self.RANGES:
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} range is empty: ({lo}, {hi})")
        if not self.conditions:
            raise ValueError("at least one condition tag is required")
        return self

    def condition_of(self, seq: int) -> str:
        return self.conditions[seq % len(self.conditions)]

    def mid(self, name: str) -> float:
        lo, hi = getattr(self, name)
        return 0.5 * (lo + hi)


@dataclass(frozen=True)
class Walker:
    torso_width: float
    limb_length: float
    swing_amplitude: float
    stride_frequency: float
    phase: float


@dataclass(frozen=True)
class Placement:
    """Per-sequence nuisance shared by all identities at that sequence index."""

    start: float
    scale: float
    x: float
    ground: float
    speed: float


def _latin(rng, n, lo, hi):
    # stratified draws keep identities spread over the whole range
    u = (rng.permutation(n) + rng.random(n)) / n
    return lo + (hi - lo) * u


def identity_params(spec: SynthSpec, rng: np.random.Generator) -> list[Walker]:
    n = spec.num_ids
    cols = {name: _latin(rng, n, *getattr(spec, name)) for name in spec.RANGES}
    shape_keys, motion_keys = spec.RANGES[:2], spec.RANGES[2:]
    walkers = []
    for i in range(n):
        if spec.mode == "shape_only":
            fixed = motion_keys
        elif spec.mode == "motion_only":
            fixed = shape_keys
        else:
            fixed = motion_keys if i < n // 2 else shape_keys
        walkers.append(Walker(**{k: spec.mid(k) if k in fixed else float(cols[k][i]) for k in spec.RANGES}))
    return walkers


def sequence_placements(spec: SynthSpec, rng: np.random.Generator) -> list[Placement]:
    out = []
    for _ in range(spec.seqs_per_id):
        out.append(Placement(
            start=float(rng.random()),
            scale=float(rng.uniform(0.88, 1.0)),
            x=float(spec.width / 2 + rng.uniform(-3, 3)),
            ground=float(spec.height - 3 - rng.uniform(0, 2)),
            speed=float(rng.uniform(0.96, 1.04)),
        ))
    return out


def pose(w: Walker, place: Placement, t: float) -> dict:
    """Joint positions (x, y) in pixels at frame ``t``; y grows downwards."""
    z = place.scale
    psi = 2 * math.pi * (place.start + w.stride_frequency * place.speed * t)
    a = w.swing_amplitude
    L = w.limb_length * z
    hip = np.array([place.x, place.ground - L - 0.8 * z * abs(math.sin(psi))])
    shoulder = hip - [0.0, TORSO_LENGTH * z]
    head = shoulder - [0.0, (1.0 + HEAD_RADIUS) * z]
    joints = {"hip": hip, "shoulder": shoulder, "head": head}
    for side, sign in (("l", 1.0), ("r", -1.0)):
        theta = sign * a * math.sin(psi)
        knee_flex = 1.2 * a * max(0.0, sign * math.cos(psi))
        knee = hip + 0.5 * L * np.array([math.sin(theta), math.cos(theta)])
        foot = knee + 0.5 * L * np.array([math.sin(theta - knee_flex), math.cos(theta - knee_flex)])
        alpha = sign * a * math.sin(psi + w.phase)
        hand = shoulder + 0.75 * L * np.array([math.sin(alpha), math.cos(alpha)])
        joints.update({f"knee_{side}": knee, f"foot_{side}": foot, f"hand_{side}": hand})
    return joints


def _segment_param(px, py, a, b):
    d = b - a
    denom = float(d @ d)
    if denom == 0.0:
        return np.zeros_like(px)
    return np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / denom, 0.0, 1.0)


def _capsule(px, py, a, b, radius):
    u = _segment_param(px, py, a, b)
    dx = px - (a[0] + u * (b[0] - a[0]))
    dy = py - (a[1] + u * (b[1] - a[1]))
    return dx * dx + dy * dy <= radius * radius


def body_parts(w: Walker, joints: dict, z: float, condition: str) -> list:
    """Painting order of (label, segments, radius); later parts overwrite earlier ones."""
    torso_r = 0.5 * w.torso_width * z * (1.35 if condition == "CL" else 1.0)
    arm_r = (1.5 + (0.8 if condition == "CL" else 0.0)) * z
    leg_r = 2.2 * z
    j = joints
    return [
        ("arm_r", [(j["shoulder"], j["hand_r"])], arm_r),
        ("leg_r", [(j["hip"], j["knee_r"]), (j["knee_r"], j["foot_r"])], leg_r),
        ("torso", [(j["shoulder"], j["hip"])], torso_r),
        ("leg_l", [(j["hip"], j["knee_l"]), (j["knee_l"], j["foot_l"])], leg_r),
        ("arm_l", [(j["shoulder"], j["hand_l"])], arm_r),
        ("head", [(j["head"], j["head"])], HEAD_RADIUS * z),
    ]


def render_labels(w: Walker, place: Placement, t: float, condition: str, shape) -> np.ndarray:
    h, wd = shape
    py, px = np.mgrid[0:h, 0:wd].astype(np.float64)
    labels = np.zeros(shape, dtype=np.uint8)
    joints = pose(w, place, t)
    for name, segs, r in body_parts(w, joints, place.scale, condition):
        for a, b in segs:
            labels[_capsule(px, py, a, b, r)] = PART_LABELS[name]
    if condition == "BG":
        z = place.scale
        cx = joints["hip"][0] + 0.5 * w.torso_width * z + 2.5 * z
        cy = joints["hip"][1] - 3.0 * z
        bag = ((px - cx) / (3.0 * z)) ** 2 + ((py - cy) / (5.0 * z)) ** 2 <= 1.0
        labels[bag & (labels == 0)] = PART_LABELS["torso"]  # carried objects parse as torso
    return labels


def render_flow(w: Walker, place: Placement, t: float, shape) -> np.ndarray:
    """Encoded displacement field [H, W, 3] between frames ``t`` and ``t + 1``."""
    h, wd = shape
    py, px = np.mgrid[0:h, 0:wd].astype(np.float64)
    j0, j1 = pose(w, place, t), pose(w, place, t + 1)
    parts0 = body_parts(w, j0, place.scale, "NM")
    parts1 = body_parts(w, j1, place.scale, "NM")
    disp = np.zeros((2, h, wd))
    mask = np.zeros(shape, dtype=bool)
    for (_, segs0, r), (_, segs1, _) in zip(parts0, parts1):
        for (a0, b0), (a1, b1) in zip(segs0, segs1):
            hit = _capsule(px, py, a0, b0, r)
            u = _segment_param(px, py, a0, b0)[hit]
            for k in range(2):
                disp[k][hit] = (a1[k] - a0[k]) + u * ((b1[k] - a1[k]) - (b0[k] - a0[k]))
            mask |= hit
    mag = np.hypot(disp[0], disp[1])
    enc = np.stack([
        128.0 + FLOW_GAIN * disp[0],
        128.0 + FLOW_GAIN * disp[1],
        FLOW_MAG_GAIN * mag,
    ], axis=-1)
    enc = np.clip(np.rint(enc), 0, 255).astype(np.uint8)
    enc[~mask] = 0
    return enc


def canonical(w: Walker, spec: SynthSpec) -> Walker:
    return Walker(spec.mid("torso_width"), spec.mid("limb_length"),
                  w.swing_amplitude, w.stride_frequency, w.phase)


def render_sequence(spec: SynthSpec, w: Walker, place: Placement, condition: str) -> dict:
    """Uint8 frames per modality: sil/par as [T, H, W], flow as [T, H, W, 3]."""
    shape = (spec.height, spec.width)
    labels = np.stack([render_labels(w, place, t, condition, shape) for t in range(spec.frames)])
    body = canonical(w, spec)
    flow = np.stack([render_flow(body, place, t, shape) for t in range(spec.frames)])
    return {
        "sil": np.where(labels > 0, 255, 0).astype(np.uint8),
        "par": (labels * PARSING_LEVEL).astype(np.uint8),
        "flow": flow,
    }


def identity_name(i: int) -> str:
    return f"{i:03d}"


def sequence_name(j: int) -> str:
    return f"{j:02d}"


def synth_generate(spec: SynthSpec, out_dir, seed: int = 0) -> Path:
    """Render the dataset under ``out_dir`` and write its manifest; returns the manifest path."""
    spec.validate()
    rng = np.random.default_rng(seed)
    walkers = identity_params(spec, rng)
    places = sequence_placements(spec, rng)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows = ["\t".join(MANIFEST_HEADER)]
    for i, w in enumerate(walkers):
        for j, place in enumerate(places):
            cond = spec.condition_of(j)
            frames = render_sequence(spec, w, place, cond)
            for m, ext in MODALITY_FILES.items():
                rel = f"{identity_name(i)}/{sequence_name(j)}/{m}"
                d = root / rel
                d.mkdir(parents=True, exist_ok=True)
                for t, img in enumerate(frames[m]):
                    write_pnm(d / f"{t:04d}.{ext}", img)
                rows.append("\t".join((identity_name(i), sequence_name(j), cond, m, rel)))
    manifest = root / MANIFEST_NAME
    manifest.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return manifest


def spec_fields() -> list[str]:
    return [f.name for f in fields(SynthSpec)]
