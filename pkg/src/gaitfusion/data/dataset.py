"""Manifest parsing, sequence loading and identity-balanced batch sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import read_pnm
from .preprocess import OUT_H, OUT_W, AugmentPolicy, alignment_from_silhouette, apply_alignment, augment, flow_mask_preprocess
from .synth import MANIFEST_HEADER, MANIFEST_NAME, MODALITY_FILES, PARSING_LEVEL, PART_LABELS

NUM_PART_LABELS = max(PART_LABELS.values())


@dataclass(frozen=True)
class ManifestRow:
    identity: str
    sequence: str
    condition: str
    modality: str
    path: str


@dataclass
class DatasetManifest:
    """Rows of a dataset directory.  ``path`` is the frame directory relative
    to ``root``; frames inside it are ``<index>.pgm`` or ``<index>.ppm``."""

    root: Path
    rows: list

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh, delimiter="\t")
            header = next(reader, None)
            if tuple(header or ()) != MANIFEST_HEADER:
                raise ValueError(f"{path}: bad header {header}")
            rows = []
            for n, rec in enumerate(reader, start=2):
                if len(rec) != len(MANIFEST_HEADER):
                    raise ValueError(f"{path}:{n}: expected {len(MANIFEST_HEADER)} fields, got {len(rec)}")
                row = ManifestRow(*rec)
                if row.modality not in MODALITY_FILES:
                    raise ValueError(f"{path}:{n}: unknown modality {row.modality!r}")
                rows.append(row)
        manifest = cls(root, rows)
        manifest.check_files()
        return manifest

    def frame_paths(self, row: ManifestRow) -> list[Path]:
        d = self.root / row.path
        return sorted(d.glob(f"*.{MODALITY_FILES[row.modality]}"), key=lambda p: int(p.stem))

    def check_files(self) -> None:
        for row in self.rows:
            if not self.frame_paths(row):
                raise FileNotFoundError(f"no frames under {self.root / row.path}")

    def identities(self) -> list[str]:
        return sorted({r.identity for r in self.rows})

    def label_map(self) -> dict[str, int]:
        return {ident: i for i, ident in enumerate(self.identities())}

    def sequences(self) -> list[tuple[str, str, str, dict]]:
        """(identity, sequence, condition, {modality: row}) in manifest order."""
        out: dict[tuple, dict] = {}
        conds: dict[tuple, str] = {}
        for r in self.rows:
            key = (r.identity, r.sequence)
            out.setdefault(key, {})[r.modality] = r
            if conds.setdefault(key, r.condition) != r.condition:
                raise ValueError(f"sequence {key} has inconsistent condition tags")
        return [(i, s, conds[(i, s)], mods) for (i, s), mods in out.items()]


@dataclass
class SequenceSample:
    identity: str
    label: int
    sequence: str
    condition: str
    frames: dict = field(repr=False)  # modality -> float32 [T, C, 64, 44]

    def __post_init__(self):
        counts = {m: len(x) for m, x in self.frames.items()}
        if len(set(counts.values())) > 1:
            raise ValueError(f"{self.identity}/{self.sequence}: frame counts differ {counts}")
        for m, x in self.frames.items():
            if x.ndim != 4 or x.shape[2:] != (OUT_H, OUT_W):
                raise ValueError(f"{self.identity}/{self.sequence}/{m}: frames must be 64x44, got {x.shape}")

    @property
    def num_frames(self) -> int:
        return len(next(iter(self.frames.values())))


def load_frames(manifest: DatasetManifest, rows: dict, modalities) -> dict:
    """Read, align and normalize one sequence.  Every frame is aligned with
    the transform derived from its own silhouette."""
    if "sil" not in rows:
        raise ValueError("a silhouette modality is required to align frames")
    sils = [read_pnm(p) for p in manifest.frame_paths(rows["sil"])]
    raw = {}
    for m in modalities:
        if m not in rows:
            raise ValueError(f"modality {m!r} missing for {rows['sil'].identity}/{rows['sil'].sequence}")
        raw[m] = sils if m == "sil" else [read_pnm(p) for p in manifest.frame_paths(rows[m])]
        if len(raw[m]) != len(sils):
            raise ValueError(f"{rows[m].path}: {len(raw[m])} frames but {len(sils)} silhouettes")
    out = {m: [] for m in modalities}
    for t, sil in enumerate(sils):
        tf = alignment_from_silhouette(sil)
        for m in modalities:
            img = raw[m][t]
            if m == "flow":
                img = flow_mask_preprocess(img.transpose(2, 0, 1), sil)
            out[m].append(apply_alignment(img, tf))
    frames = {}
    for m, xs in out.items():
        x = np.stack(xs).astype(np.float32)
        if m == "par":
            x = np.rint(x / PARSING_LEVEL) / NUM_PART_LABELS
        else:
            x = x / 255.0
        frames[m] = x.astype(np.float32)
    return frames


class GaitDataset:
    """All sequences of a dataset directory held in memory, preprocessed."""

    def __init__(self, samples: list, modalities: tuple):
        self.samples = list(samples)
        self.modalities = tuple(modalities)

    @classmethod
    def from_dir(cls, root, modalities=("sil", "par", "flow")) -> "GaitDataset":
        manifest = DatasetManifest.load(root)
        labels = manifest.label_map()
        samples = [
            SequenceSample(ident, labels[ident], seq, cond, load_frames(manifest, rows, modalities))
            for ident, seq, cond, rows in manifest.sequences()
        ]
        return cls(samples, modalities)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> SequenceSample:
        return self.samples[i]

    @property
    def num_classes(self) -> int:
        return len({s.label for s in self.samples})

    def by_label(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            out.setdefault(s.label, []).append(i)
        return out

    def subset(self, keep) -> "GaitDataset":
        """Samples for which ``keep(sample)`` holds, with labels re-encoded to
        be contiguous (in sorted identity order)."""
        chosen = [s for s in self.samples if keep(s)]
        remap = {ident: i for i, ident in enumerate(sorted({s.identity for s in chosen}))}
        return GaitDataset(
            [SequenceSample(s.identity, remap[s.identity], s.sequence, s.condition, s.frames) for s in chosen],
            self.modalities,
        )

    def select_modalities(self, modalities) -> "GaitDataset":
        missing = set(modalities) - set(self.modalities)
        if missing:
            raise ValueError(f"dataset lacks modalities {sorted(missing)}")
        return GaitDataset(
            [SequenceSample(s.identity, s.label, s.sequence, s.condition, {m: s.frames[m] for m in modalities})
             for s in self.samples],
            tuple(modalities),
        )


@dataclass(frozen=True)
class BatchItem:
    sample: int
    frames: tuple


def pick_frames(n: int, k: int, rng: np.random.Generator) -> tuple:
    """A random contiguous window of ``k`` frames, or ``k`` sorted draws with
    replacement when the sequence is shorter than ``k``."""
    if n >= k:
        start = int(rng.integers(0, n - k + 1))
        return tuple(range(start, start + k))
    return tuple(int(i) for i in np.sort(rng.integers(0, n, size=k)))


def pk_sample(dataset: GaitDataset, q: int, p: int, k: int, rng: np.random.Generator) -> list[BatchItem]:
    """``q`` identities x ``p`` sequences x ``k`` frames, identities and
    sequences drawn without replacement."""
    if min(q, p, k) < 1:
        raise ValueError(f"q, p, k must be positive, got {(q, p, k)}")
    groups = dataset.by_label()
    eligible = sorted(lbl for lbl, idx in groups.items() if len(idx) >= p)
    if len(eligible) < q:
        raise ValueError(f"need {q} identities with >= {p} sequences, dataset has {len(eligible)}")
    batch = []
    for lbl in rng.choice(eligible, size=q, replace=False):
        for i in rng.choice(groups[int(lbl)], size=p, replace=False):
            i = int(i)
            batch.append(BatchItem(i, pick_frames(dataset[i].num_frames, k, rng)))
    return batch


def collate(dataset: GaitDataset, items: list, policy: AugmentPolicy | None = None, rng=None, modalities=None):
    """Stack a batch into ``({modality: [B, k, C, 64, 44]}, labels)``."""
    modalities = tuple(modalities or dataset.modalities)
    per_mod = {m: [] for m in modalities}
    labels = np.empty(len(items), dtype=np.int64)
    for b, item in enumerate(items):
        s = dataset[item.sample]
        frames = {m: s.frames[m][list(item.frames)] for m in modalities}
        if policy is not None:
            frames, _ = augment(frames, policy, rng)
        for m in modalities:
            per_mod[m].append(frames[m])
        labels[b] = s.label
    return {m: np.stack(v) for m, v in per_mod.items()}, labels
