"""Gallery/probe retrieval: embedding tables, distances and rank-k, mAP,
mINP with per-condition reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import json_from_record, json_record, read_records, write_records

CONDITIONS_KEY = "__conditions__"
REPORT_HEADER = ("condition", "rank1", "rank5", "map", "minp", "skipped")


@dataclass
class EmbeddingTable:
    identities: list
    sequences: list
    conditions: list
    embeddings: np.ndarray  # [N, P, D]

    def __post_init__(self):
        self.identities = [str(i) for i in self.identities]
        self.sequences = [str(s) for s in self.sequences]
        self.conditions = [str(c) for c in self.conditions]
        self.embeddings = np.asarray(self.embeddings)
        n = len(self.identities)
        if self.embeddings.ndim != 3 or self.embeddings.shape[0] != n:
            raise ValueError(f"expected embeddings [{n}, P, D], got {self.embeddings.shape}")
        if len(self.sequences) != n or len(self.conditions) != n:
            raise ValueError("identities, sequences and conditions must have equal length")
        keys = self.keys()
        if len(set(keys)) != n:
            dup = sorted({k for k in keys if keys.count(k) > 1})
            raise ValueError(f"duplicate (identity, sequence) keys: {dup}")

    def __len__(self) -> int:
        return len(self.identities)

    def keys(self) -> list:
        return list(zip(self.identities, self.sequences))

    def select(self, index) -> "EmbeddingTable":
        index = np.flatnonzero(index) if np.asarray(index).dtype == bool else np.asarray(index, dtype=int)
        return EmbeddingTable(
            [self.identities[i] for i in index],
            [self.sequences[i] for i in index],
            [self.conditions[i] for i in index],
            self.embeddings[index],
        )

    def save(self, path) -> None:
        """One record per sequence named ``<identity>/<sequence>`` plus the condition tags."""
        records = [(f"{i}/{s}", e) for (i, s), e in zip(self.keys(), self.embeddings)]
        records.append((CONDITIONS_KEY, json_record(self.conditions)))
        write_records(path, records)

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        records = read_records(path)
        conditions = json_from_record(records.pop(CONDITIONS_KEY)) if CONDITIONS_KEY in records else None
        names = list(records)
        ids, seqs = zip(*(n.rsplit("/", 1) for n in names)) if names else ((), ())
        if conditions is None:
            conditions = [""] * len(names)
        return cls(list(ids), list(seqs), conditions, np.stack([records[n] for n in names]))


def extract_embeddings(model, dataset) -> EmbeddingTable:
    """One row per sequence from all of its frames, computed in eval mode."""
    was_training = model.training
    model.eval()
    try:
        rows = []
        needed = model.config.modalities
        for s in dataset.samples:
            batch = {m: s.frames[m][None] for m in needed}
            emb, _ = model(batch)
            rows.append(emb.data[0])
    finally:
        model.train(was_training)
    return EmbeddingTable(
        [s.identity for s in dataset.samples],
        [s.sequence for s in dataset.samples],
        [s.condition for s in dataset.samples],
        np.stack(rows) if rows else np.zeros((0, model.config.parts, model.config.embed_dim)),
    )


def distance_matrix(probe, gallery) -> np.ndarray:
    """Mean over parts of the Euclidean distance between part vectors."""
    a = np.asarray(probe.embeddings if isinstance(probe, EmbeddingTable) else probe, dtype=np.float64)
    b = np.asarray(gallery.embeddings if isinstance(gallery, EmbeddingTable) else gallery, dtype=np.float64)
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ValueError(f"part/feature dims differ: probe {a.shape}, gallery {b.shape}")
    out = np.zeros((a.shape[0], b.shape[0]))
    for p in range(a.shape[1]):
        diff = a[:, None, p, :] - b[None, :, p, :]
        out += np.sqrt((diff * diff).sum(axis=-1))
    return out / max(a.shape[1], 1)


@dataclass
class ProbeRanks:
    """Per-probe 1-based ranks of positives among the valid gallery entries."""

    positive_ranks: list  # arrays, one per probe that has positives
    skipped: int


def _check(dists, probe_labels, gallery_labels, exclusion_mask):
    dists = np.asarray(dists, dtype=np.float64)
    pl, gl = np.asarray(probe_labels), np.asarray(gallery_labels)
    if dists.ndim != 2 or dists.shape != (len(pl), len(gl)):
        raise ValueError(f"distance matrix {dists.shape} does not match {len(pl)} probes x {len(gl)} gallery")
    if exclusion_mask is None:
        exclusion_mask = np.zeros(dists.shape, dtype=bool)
    exclusion_mask = np.asarray(exclusion_mask, dtype=bool)
    if exclusion_mask.shape != dists.shape:
        raise ValueError(f"exclusion mask {exclusion_mask.shape} does not match distances {dists.shape}")
    return dists, pl, gl, exclusion_mask


def positive_ranks(dists, probe_labels, gallery_labels, exclusion_mask=None) -> ProbeRanks:
    """Gallery entries are sorted by ascending distance, ties by lower index;
    excluded entries are removed before ranking."""
    dists, pl, gl, excl = _check(dists, probe_labels, gallery_labels, exclusion_mask)
    ranks, skipped = [], 0
    for i in range(len(pl)):
        valid = np.flatnonzero(~excl[i])
        order = valid[np.argsort(dists[i, valid], kind="stable")]
        hits = np.flatnonzero(gl[order] == pl[i]) + 1
        if hits.size == 0:
            skipped += 1
        else:
            ranks.append(hits)
    return ProbeRanks(ranks, skipped)


def _mean(values, what) -> float:
    if not values:
        raise ValueError(f"{what}: no probe has a valid positive in the gallery")
    return float(np.mean(values))


def rank_k(dists, probe_labels, gallery_labels, k: int, exclusion_mask=None) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    r = positive_ranks(dists, probe_labels, gallery_labels, exclusion_mask)
    return _mean([float(h[0] <= k) for h in r.positive_ranks], "rank_k")


def mean_ap(dists, probe_labels, gallery_labels, exclusion_mask=None) -> float:
    r = positive_ranks(dists, probe_labels, gallery_labels, exclusion_mask)
    return _mean([float(np.mean(np.arange(1, len(h) + 1) / h)) for h in r.positive_ranks], "mean_ap")


def m_inp(dists, probe_labels, gallery_labels, exclusion_mask=None) -> float:
    r = positive_ranks(dists, probe_labels, gallery_labels, exclusion_mask)
    return _mean([len(h) / float(h[-1]) for h in r.positive_ranks], "m_inp")


def retrieval_metrics(dists, probe_labels, gallery_labels, exclusion_mask=None, ks=(1, 5)) -> dict:
    """rank-k for each k, map, minp and the skipped-probe count from one ranking pass."""
    r = positive_ranks(dists, probe_labels, gallery_labels, exclusion_mask)
    out = {f"rank{k}": _mean([float(h[0] <= k) for h in r.positive_ranks], "rank_k") for k in ks}
    out["map"] = _mean([float(np.mean(np.arange(1, len(h) + 1) / h)) for h in r.positive_ranks], "mean_ap")
    out["minp"] = _mean([len(h) / float(h[-1]) for h in r.positive_ranks], "m_inp")
    out["skipped"] = r.skipped
    return out


@dataclass
class Protocol:
    """Which rows serve as gallery and which as probes.  Empty sequence lists
    mean every sequence."""

    gallery_conditions: tuple = ("NM",)
    probe_conditions: tuple = ("NM", "BG", "CL")
    gallery_sequences: tuple = ()
    probe_sequences: tuple = ()
    exclude_same_sequence: bool = True

    def gallery_mask(self, table: EmbeddingTable) -> np.ndarray:
        return np.array([
            c in self.gallery_conditions and (not self.gallery_sequences or s in self.gallery_sequences)
            for s, c in zip(table.sequences, table.conditions)
        ], dtype=bool)

    def probe_mask(self, table: EmbeddingTable, condition: str) -> np.ndarray:
        return np.array([
            c == condition and (not self.probe_sequences or s in self.probe_sequences)
            for s, c in zip(table.sequences, table.conditions)
        ], dtype=bool)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # dicts keyed by REPORT_HEADER

    def row(self, condition: str) -> dict:
        for r in self.rows:
            if r["condition"] == condition:
                return r
        raise KeyError(condition)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r["condition"]] + [f"{r[k]:.6f}" for k in REPORT_HEADER[1:5]] + [r["skipped"]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    def table(self) -> str:
        lines = [f"{'condition':<10} {'R-1':>7} {'R-5':>7} {'mAP':>7} {'mINP':>7} {'skipped':>8}"]
        for r in self.rows:
            lines.append(
                f"{r['condition']:<10} {100 * r['rank1']:7.2f} {100 * r['rank5']:7.2f} "
                f"{100 * r['map']:7.2f} {100 * r['minp']:7.2f} {r['skipped']:8d}"
            )
        return "\n".join(lines)


def evaluate(protocol: Protocol, table: EmbeddingTable) -> EvalReport:
    """One row per probe condition (in protocol order) plus ``overall`` over all probes."""
    g = protocol.gallery_mask(table)
    if not g.any():
        raise ValueError("protocol selects an empty gallery")
    gallery = table.select(g)
    gkeys = gallery.keys()
    report = EvalReport()
    all_probes = np.zeros(len(table), dtype=bool)
    for cond in list(protocol.probe_conditions) + ["overall"]:
        if cond == "overall":
            pmask = all_probes
        else:
            pmask = protocol.probe_mask(table, cond)
            if not pmask.any():
                raise ValueError(f"protocol selects no probes for condition {cond!r}")
            all_probes |= pmask
        probes = table.select(pmask)
        d = distance_matrix(probes, gallery)
        if protocol.exclude_same_sequence:
            pk = probes.keys()
            excl = np.array([[a == b for b in gkeys] for a in pk], dtype=bool).reshape(d.shape)
        else:
            excl = None
        m = retrieval_metrics(d, probes.identities, gallery.identities, excl)
        report.rows.append({"condition": cond, **m})
    return report
