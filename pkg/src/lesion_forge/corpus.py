"""Directory-backed image corpora with JSON-lines manifests.

Layout: <root>/images/<split>/<class>/<id>.png + <root>/manifest.jsonl.
Images are 16-bit grayscale PNGs; patch pixels in [-1, 1] are mapped onto
the full uint16 range on disk.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

LABEL_CLASSES = ("normal", "benign", "malignant-mass", "malignant-calc")
SPLITS = ("train", "val", "test")

UINT16_MAX = 65535


def save_image16(path: Path, pixels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    ok = cv2.imwrite(str(path), np.ascontiguousarray(pixels.astype(np.uint16)))
    if not ok:
        raise IOError(f"failed to write {path}")


def load_image16(path: Path) -> np.ndarray:
    pixels = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise IOError(f"failed to read {path}")
    return pixels.astype(np.uint16)


def encode_unit_range(pixels: np.ndarray) -> np.ndarray:
    """Map float pixels in [-1, 1] to uint16 for storage."""
    clipped = np.clip(pixels, -1.0, 1.0)
    return np.round((clipped + 1.0) * (UINT16_MAX / 2.0)).astype(np.uint16)


def decode_unit_range(raw: np.ndarray) -> np.ndarray:
    """Inverse of encode_unit_range, back to float32 in [-1, 1]."""
    return (raw.astype(np.float32) * (2.0 / UINT16_MAX) - 1.0).astype(np.float32)


@dataclass
class ManifestRecord:
    id: str
    label_class: str
    split: str
    boxes: list[dict] = field(default_factory=list)
    seed: int = 0
    provenance: str = "real"
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "id": self.id,
            "class": self.label_class,
            "split": self.split,
            "boxes": self.boxes,
            "seed": self.seed,
            "provenance": self.provenance,
        }
        if self.extra:
            payload["extra"] = self.extra
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "ManifestRecord":
        payload = json.loads(line)
        return ManifestRecord(
            id=payload["id"],
            label_class=payload["class"],
            split=payload["split"],
            boxes=payload.get("boxes", []),
            seed=payload.get("seed", 0),
            provenance=payload.get("provenance", "real"),
            extra=payload.get("extra", {}),
        )


class Corpus:
    """A manifest plus its image files under a root directory."""

    def __init__(self, root: Path, records: list[ManifestRecord] | None = None):
        self.root = Path(root)
        self.records: list[ManifestRecord] = records if records is not None else []

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.jsonl"

    def image_path(self, record: ManifestRecord) -> Path:
        return self.root / "images" / record.split / record.label_class / f"{record.id}.png"

    def add(self, record: ManifestRecord, pixels: np.ndarray) -> None:
        save_image16(self.image_path(record), pixels)
        self.records.append(record)

    def add_patch(self, record: ManifestRecord, patch_pixels: np.ndarray) -> None:
        """Store a float [-1, 1] patch as a 16-bit image."""
        self.add(record, encode_unit_range(patch_pixels))

    def save_manifest(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.manifest_path, "w") as fh:
            for record in self.records:
                fh.write(record.to_json() + "\n")

    @staticmethod
    def load(root: Path) -> "Corpus":
        root = Path(root)
        manifest = root / "manifest.jsonl"
        if not manifest.exists():
            raise FileNotFoundError(f"no manifest at {manifest}")
        with open(manifest) as fh:
            records = [ManifestRecord.from_json(line) for line in fh if line.strip()]
        return Corpus(root, records)

    def select(
        self,
        split: str | None = None,
        label_class: str | None = None,
        provenance: str | None = None,
    ) -> list[ManifestRecord]:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if label_class is not None:
            out = [r for r in out if r.label_class == label_class]
        if provenance is not None:
            out = [r for r in out if r.provenance == provenance]
        return out

    def load_pixels(self, record: ManifestRecord) -> np.ndarray:
        return load_image16(self.image_path(record))

    def load_patch_pixels(self, record: ManifestRecord) -> np.ndarray:
        return decode_unit_range(self.load_pixels(record))

    def class_histogram(self, split: str | None = None) -> dict[str, int]:
        hist: dict[str, int] = {}
        for record in self.select(split=split):
            hist[record.label_class] = hist.get(record.label_class, 0) + 1
        return hist


def content_hash(root: Path) -> str:
    """SHA-256 over sorted relative paths and file bytes under root."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()
