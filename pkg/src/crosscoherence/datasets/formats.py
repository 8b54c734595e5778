"""On-disk formats: CPC1 cloud files, JSON-lines manifests and triplet files."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np

from crosscoherence.distractors import DistractorSet, Triplet
from crosscoherence.geometry import ColoredPointCloud

CLOUD_MAGIC = b"CPC1"
SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


def write_cloud(path, cloud: ColoredPointCloud) -> None:
    """CPC1: magic, u32 LE point count, then N x (x, y, z, r, g, b) float32 LE."""
    data = np.concatenate([cloud.points, cloud.colors], axis=1).astype("<f4")
    Path(path).write_bytes(CLOUD_MAGIC + struct.pack("<I", data.shape[0]) + data.tobytes())


def read_cloud(path, shape_id: Optional[str] = None) -> ColoredPointCloud:
    raw = Path(path).read_bytes()
    if raw[:4] != CLOUD_MAGIC:
        raise ManifestError(f"{path}: not a CPC1 cloud file")
    (n,) = struct.unpack_from("<I", raw, 4)
    if len(raw) != 8 + 24 * n:
        raise ManifestError(f"{path}: expected {8 + 24 * n} bytes for {n} points, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, 6).astype(np.float64)
    return ColoredPointCloud(data[:, :3], data[:, 3:], shape_id)


@dataclass
class ShapeRecord:
    shape_id: str
    cloud: str
    class_label: str
    captions: List[str]
    split: str
    attributes: Optional[dict] = None
    distractor_set: Optional[DistractorSet] = None

    def to_dict(self) -> dict:
        return {
            "shape_id": self.shape_id,
            "cloud": self.cloud,
            "class_label": self.class_label,
            "captions": list(self.captions),
            "split": self.split,
            "attributes": self.attributes,
            "distractor_set": self.distractor_set.to_dict() if self.distractor_set else None,
        }

    @classmethod
    def from_dict(cls, d: dict, where: str = "") -> "ShapeRecord":
        try:
            ds = d.get("distractor_set")
            rec = cls(
                shape_id=str(d["shape_id"]),
                cloud=str(d["cloud"]),
                class_label=str(d["class_label"]),
                captions=[str(c) for c in d["captions"]],
                split=str(d["split"]),
                attributes=d.get("attributes"),
                distractor_set=DistractorSet(ds["reference_id"], tuple(ds["hard_ids"]), ds["easy_id"],
                                             ds["class_label"]) if ds else None,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"{where}malformed record: {e}") from None
        if rec.split not in SPLITS:
            raise ManifestError(f"{where}record {rec.shape_id!r} has unknown split {rec.split!r}")
        return rec


@dataclass
class DatasetManifest:
    records: List[ShapeRecord] = field(default_factory=list)
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        self.base_dir = Path(self.base_dir)
        self.validate(check_files=False)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return [r.to_dict() for r in self.records] == [r.to_dict() for r in other.records]

    def validate(self, check_files: bool = True) -> None:
        seen = set()
        for r in self.records:
            if r.shape_id in seen:
                raise ManifestError(f"duplicate shape id {r.shape_id!r}")
            seen.add(r.shape_id)
            if r.split not in SPLITS:
                raise ManifestError(f"record {r.shape_id!r} has unknown split {r.split!r}")
            if check_files and not self.cloud_path(r).is_file():
                raise ManifestError(f"record {r.shape_id!r}: cloud file {self.cloud_path(r)} does not exist")

    def cloud_path(self, record: ShapeRecord) -> Path:
        return self.base_dir / record.cloud

    def by_id(self) -> Dict[str, ShapeRecord]:
        return {r.shape_id: r for r in self.records}

    def split(self, name: Optional[str]) -> List[ShapeRecord]:
        return [r for r in self.records if name is None or r.split == name]

    def clouds(self, split: Optional[str] = None) -> Dict[str, ColoredPointCloud]:
        return {r.shape_id: read_cloud(self.cloud_path(r), r.shape_id) for r in self.split(split)}

    def captions(self, split: Optional[str] = None) -> Dict[str, List[str]]:
        return {r.shape_id: list(r.captions) for r in self.split(split)}

    def class_labels(self, split: Optional[str] = None) -> Dict[str, str]:
        return {r.shape_id: r.class_label for r in self.split(split)}

    def distractor_sets(self, split: Optional[str] = None) -> List[DistractorSet]:
        return [r.distractor_set for r in self.split(split) if r.distractor_set is not None]


def save_manifest(manifest: DatasetManifest, path) -> None:
    header = {"format": "crosscoherence-manifest", "schema_version": SCHEMA_VERSION}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Load a manifest; cloud paths resolve relative to the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} does not exist")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        return DatasetManifest([], path.parent)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}:1: bad header ({e})") from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(f"{path}: unsupported schema version {header.get('schema_version')!r}")
    records = []
    for n, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{n}: bad JSON ({e})") from None
        records.append(ShapeRecord.from_dict(d, where=f"{path}:{n}: "))
    manifest = DatasetManifest(records, path.parent)
    manifest.validate(check_files=check_files)
    return manifest


def save_triplets(triplets: Iterable[Triplet], path) -> None:
    lines = [json.dumps(t.to_dict(), sort_keys=True, ensure_ascii=False) for t in triplets]
    Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


def load_triplets(path) -> List[Triplet]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            out.append(Triplet(d["shape_ids"], d["text"], int(d["target"]), d.get("difficulty") or []))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"{path}:{n}: malformed triplet ({e})") from None
    return out
