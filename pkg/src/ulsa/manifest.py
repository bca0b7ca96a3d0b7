"""Line-delimited dataset manifests.

A manifest is UTF-8 JSON-lines: a header line `{"manifest_version": 1, ...}`
followed by one record per line. Paths are stored relative to the manifest
file so benchmark directories stay relocatable.

Record fields (schema version 1):
  image_path   str, required
  stain        str, required
  split        "train" | "val" | "test"
  label        int or null (classification ground truth)
  mask_path    str or null (segmentation ground truth)
  origin       "real" | "synthetic"
  patient_id   str, required

A labeled record carries exactly one of label / mask_path; an unlabeled one
carries neither. No patient id may appear in more than one split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

from .errors import ManifestError
from .imagecore import read_png

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
ORIGINS = ("real", "synthetic")


@dataclass(frozen=True)
class Record:
    image_path: str
    stain: str
    split: str
    patient_id: str
    label: Optional[int] = None
    mask_path: Optional[str] = None
    origin: str = "real"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"bad split {self.split!r} for {self.image_path}")
        if self.origin not in ORIGINS:
            raise ManifestError(f"bad origin {self.origin!r} for {self.image_path}")
        if self.label is not None and self.mask_path is not None:
            raise ManifestError(f"record {self.image_path} carries both label and mask_path")

    @property
    def labeled(self) -> bool:
        return self.label is not None or self.mask_path is not None

    def to_dict(self) -> dict:
        return {
            "image_path": self.image_path,
            "stain": self.stain,
            "split": self.split,
            "label": self.label,
            "mask_path": self.mask_path,
            "origin": self.origin,
            "patient_id": self.patient_id,
        }

    @staticmethod
    def from_dict(doc: dict) -> "Record":
        known = {"image_path", "stain", "split", "label", "mask_path", "origin", "patient_id"}
        unknown = set(doc) - known
        if unknown:
            raise ManifestError(f"unknown record fields {sorted(unknown)}")
        missing = {"image_path", "stain", "split", "patient_id"} - set(doc)
        if missing:
            raise ManifestError(f"record missing fields {sorted(missing)}")
        return Record(
            image_path=doc["image_path"],
            stain=doc["stain"],
            split=doc["split"],
            patient_id=doc["patient_id"],
            label=doc.get("label"),
            mask_path=doc.get("mask_path"),
            origin=doc.get("origin", "real"),
        )


@dataclass
class Manifest:
    records: list[Record] = field(default_factory=list)
    base_dir: Path = Path(".")
    image_size: Optional[tuple[int, int]] = None  # (H, W) if homogeneous

    def resolve(self, rel: str) -> Path:
        return (self.base_dir / rel).resolve()

    def image_file(self, rec: Record) -> Path:
        return self.resolve(rec.image_path)

    def mask_file(self, rec: Record) -> Optional[Path]:
        return self.resolve(rec.mask_path) if rec.mask_path else None

    def filter(self, **kwargs) -> list[Record]:
        """Records matching all given field values, e.g. filter(split="test", stain="srcA")."""
        out = self.records
        for key, val in kwargs.items():
            out = [r for r in out if getattr(r, key) == val]
        return out

    def stains(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.stain, None)
        return list(seen)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        header: dict = {"manifest_version": MANIFEST_VERSION}
        if self.image_size is not None:
            header["image_size"] = list(self.image_size)
        lines = [json.dumps(header)]
        lines += [json.dumps(r.to_dict()) for r in self.records]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @staticmethod
    def load(path: str | Path) -> "Manifest":
        path = Path(path)
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise ManifestError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("manifest_version") != MANIFEST_VERSION:
            raise ManifestError(
                f"{path}: unsupported manifest_version {header.get('manifest_version')!r}"
            )
        size = header.get("image_size")
        records = [Record.from_dict(json.loads(ln)) for ln in lines[1:]]
        man = Manifest(records, base_dir=path.parent, image_size=tuple(size) if size else None)
        man.check_split_disjointness()
        return man

    def check_split_disjointness(self) -> None:
        seen: dict[str, str] = {}
        for r in self.records:
            prev = seen.setdefault(r.patient_id, r.split)
            if prev != r.split:
                raise ManifestError(
                    f"patient {r.patient_id} appears in splits {prev!r} and {r.split!r}"
                )

    def validate_files(self) -> None:
        """Check every referenced file exists and decodes to the declared size."""
        for r in self.records:
            img_path = self.image_file(r)
            if not img_path.is_file():
                raise ManifestError(f"missing image file {img_path}")
            img = read_png(img_path)
            if self.image_size is not None and (img.height, img.width) != self.image_size:
                raise ManifestError(
                    f"{img_path}: decoded {img.height}x{img.width}, "
                    f"declared {self.image_size[0]}x{self.image_size[1]}"
                )
            mask_path = self.mask_file(r)
            if mask_path is not None and not mask_path.is_file():
                raise ManifestError(f"missing mask file {mask_path}")


def merge(manifests: Iterable[Manifest], base_dir: Path) -> Manifest:
    """Concatenate manifests, rebasing record paths onto a common base_dir."""
    base_dir = Path(base_dir).resolve()
    out: list[Record] = []
    size = None
    for m in manifests:
        if m.image_size is not None:
            size = m.image_size
        for r in m.records:
            img = Path(_relpath(m.resolve(r.image_path), base_dir))
            mask = _relpath(m.resolve(r.mask_path), base_dir) if r.mask_path else None
            out.append(replace(r, image_path=str(img), mask_path=mask))
    merged = Manifest(out, base_dir=base_dir, image_size=size)
    merged.check_split_disjointness()
    return merged


def _relpath(target: Path, base: Path) -> str:
    try:
        return str(Path(target).resolve().relative_to(base))
    except ValueError:
        import os

        return os.path.relpath(str(target), str(base))
