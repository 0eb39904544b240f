"""Post-hoc scoring of recovered descriptors and slice discovery helpers.

DL compares descriptors with the class label, DD with keywords mined from
captions of training data, DI with image embeddings. Slice helpers count
caption descriptors and pseudo-label images against textual prototypes.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import providers as prov
from .errors import DissectError, ProtocolError, SchemaError
from .providers import EMPTY_CAPTION

logger = logging.getLogger(__name__)

DESCRIPTORS_SCHEMA = "textdissect.descriptors/1"
SLICE_SCHEMA = "textdissect.slices/1"
EMBEDDINGS_SCHEMA = "textdissect.embeddings/1"
EVAL_SCHEMA = "textdissect.eval/1"

ALIGNED = "aligned"
CONFLICT = "conflict"

_TIE_TOL = 1e-12


@dataclass
class DescriptorSet:
    class_id: int
    descriptors: list

    def prompt(self) -> str:
        return join_descriptors(self.descriptors)


@dataclass
class SliceReport:
    class_id: int
    ranked_attributes: list = field(default_factory=list)  # (text, count) pairs
    total_samples: int = 0

    @property
    def top(self) -> str | None:
        return self.ranked_attributes[0][0] if self.ranked_attributes else None

    def to_dict(self) -> dict:
        return {"schema": SLICE_SCHEMA, "class_id": self.class_id, "total_samples": self.total_samples,
                "ranked_attributes": [{"text": t, "count": c} for t, c in self.ranked_attributes]}


@dataclass
class PrototypeSet:
    labels: list
    vectors: np.ndarray  # one L2-normalized row per label

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float)
        if len(self.labels) < 2:
            raise ValueError("pseudo-labeling needs at least two groups")
        if self.vectors.shape[0] != len(self.labels):
            raise ValueError("one prototype per group label")
        if not np.allclose(np.linalg.norm(self.vectors, axis=1), 1.0, atol=1e-9):
            raise ValueError("prototypes must be L2-normalized")

    @classmethod
    def from_vectors(cls, mapping: dict) -> "PrototypeSet":
        labels = list(mapping)
        rows = np.array([np.asarray(mapping[k], dtype=float) for k in labels])
        return cls(labels, rows / np.linalg.norm(rows, axis=1, keepdims=True))


def join_descriptors(descriptors) -> str:
    return ", ".join(str(d) for d in descriptors)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ProtocolError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _text_similarity(left: str, right: str, emb) -> float | None:
    try:
        return cosine(prov.embed(left, emb), prov.embed(right, emb))
    except (DissectError, ValueError) as exc:
        logger.warning("embedding failed, metric unavailable: %s", exc)
        return None


def similarity_dl(descr: DescriptorSet, label: str, emb) -> float | None:
    """Descriptor-label similarity. None when the embedding service failed."""
    if not descr.descriptors:
        raise ValueError("descriptor set is empty")
    return _text_similarity(descr.prompt(), label, emb)


def similarity_dd(descr: DescriptorSet, data_keywords, emb) -> float | None:
    if not descr.descriptors:
        raise ValueError("descriptor set is empty")
    if not data_keywords:
        raise ValueError("data keyword list is empty")
    return _text_similarity(descr.prompt(), join_descriptors(data_keywords), emb)


def similarity_di(descr: DescriptorSet, image_embeddings, emb) -> float | None:
    """Mean cosine between the embedded descriptor prompt and each image embedding."""
    images = [np.asarray(v, dtype=float) for v in image_embeddings]
    if not images:
        raise ValueError("need at least one image embedding")
    if not descr.descriptors:
        raise ValueError("descriptor set is empty")
    try:
        text_vec = prov.embed(descr.prompt(), emb)
    except (DissectError, ValueError) as exc:
        logger.warning("embedding failed, metric unavailable: %s", exc)
        return None
    return float(np.mean([cosine(text_vec, v) for v in images]))


def aggregate_slices(per_image_descriptors, class_id: int = 0, exclude=()) -> SliceReport:
    """Rank caption descriptors by how many times they occur (case-folded exact match).

    Equal counts are ordered by mean position within the captions, since
    captioners list the most salient descriptor first, then alphabetically.
    """
    skip = {e.casefold() for e in exclude} | {EMPTY_CAPTION}
    counts = Counter()
    positions = Counter()
    for descriptors in per_image_descriptors:
        for pos, d in enumerate(descriptors):
            key = str(d).strip().casefold()
            if key and key not in skip:
                counts[key] += 1
                positions[key] += pos
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], positions[kv[0]] / kv[1], kv[0]))
    return SliceReport(class_id, ranked, len(per_image_descriptors))


def pseudo_label(image_features, protos: PrototypeSet, own_group) -> list:
    """Mark each image ``conflict`` when its closest prototype belongs to another group.

    Ties with the own group's prototype stay ``aligned``.
    """
    if own_group not in protos.labels:
        raise ValueError(f"unknown group {own_group!r}")
    own = protos.labels.index(own_group)
    out = []
    for feat in image_features:
        feat = np.asarray(feat, dtype=float)
        if feat.shape != protos.vectors.shape[1:]:
            raise ProtocolError(f"feature dim {feat.shape} does not match prototypes {protos.vectors.shape[1:]}")
        norm = np.linalg.norm(feat)
        if norm == 0:
            raise ValueError("zero image feature")
        sims = protos.vectors @ (feat / norm)
        out.append(ALIGNED if sims[own] >= sims.max() - _TIE_TOL else CONFLICT)
    return out


# --- documents -------------------------------------------------------------

def _load(path, schema):
    doc = json.loads(Path(path).read_text("utf-8"))
    if doc.get("schema") != schema:
        raise SchemaError(f"{path}: expected schema {schema}, got {doc.get('schema')!r}")
    return doc


def load_descriptor_sets(path) -> list:
    doc = _load(path, DESCRIPTORS_SCHEMA)
    return [DescriptorSet(int(s["class_id"]), list(s["descriptors"])) for s in doc["sets"]]


def dump_descriptor_sets(sets, path) -> None:
    doc = {"schema": DESCRIPTORS_SCHEMA,
           "sets": [{"class_id": s.class_id, "descriptors": list(s.descriptors)} for s in sets]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", "utf-8")


def load_embeddings(path) -> dict:
    """``{class_id: (n, dim) array}`` from a row-major embedding document."""
    doc = _load(path, EMBEDDINGS_SCHEMA)
    dim = int(doc["dim"])
    out = {}
    for cid, flat in doc["classes"].items():
        arr = np.asarray(flat, dtype=float)
        if arr.size % dim:
            raise ProtocolError(f"class {cid}: {arr.size} values is not a multiple of dim {dim}")
        out[int(cid)] = arr.reshape(-1, dim)
    return out


def load_class_map(path) -> dict:
    """A JSON object keyed by class id (labels or keyword lists)."""
    doc = json.loads(Path(path).read_text("utf-8"))
    doc = doc.get("classes", doc)
    return {int(k): v for k, v in doc.items()}


def evaluate(sets, emb, labels=None, keywords=None, images=None) -> list:
    rows = []
    for s in sets:
        row = {"class_id": s.class_id, "descriptors": s.prompt(), "dl": None, "dd": None, "di": None}
        if labels and s.class_id in labels and s.descriptors:
            row["dl"] = similarity_dl(s, labels[s.class_id], emb)
        if keywords and keywords.get(s.class_id) and s.descriptors:
            row["dd"] = similarity_dd(s, keywords[s.class_id], emb)
        if images is not None and s.class_id in images and s.descriptors:
            row["di"] = similarity_di(s, images[s.class_id], emb)
        rows.append(row)
    return rows


def write_eval(rows, out_dir) -> tuple:
    out_dir = Path(out_dir)
    csv_path, json_path = out_dir / "eval.csv", out_dir / "eval.json"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "dl", "dd", "di", "descriptors"])
        for r in rows:
            w.writerow([r["class_id"], *("" if r[m] is None else f"{r[m]:.12g}" for m in ("dl", "dd", "di")),
                        r["descriptors"]])
    json_path.write_text(json.dumps({"schema": EVAL_SCHEMA, "rows": rows}, indent=2) + "\n", "utf-8")
    return csv_path, json_path


def write_groups(rows, path) -> None:
    """CSV of ``image_id,group`` rows for downstream group-robust training."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "group"])
        w.writerows(rows)
