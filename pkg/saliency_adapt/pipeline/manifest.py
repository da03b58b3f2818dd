"""Dataset manifests and split-scoped readers.

On disk a dataset split is a directory::

    <split>/images/<record_id>.png
    <split>/labels/<record_id>.png
    <split>/manifest.jsonl

The first manifest line is a header (generator version, seed, asset
provenance, shift settings, ``evaluation_only`` flag); every following line
is one record entry in generation order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterator, Literal

from saliency_adapt.core.errors import InvalidArgumentError, LabelAccessError, MissingLabelError
from saliency_adapt.core.imaging import BinaryMask, GrayMap, RgbaImage, RgbImage
from saliency_adapt.core.persistence import PersistentStore

if TYPE_CHECKING:
    from saliency_adapt.pipeline.synthesis import SynthRecord

logger = logging.getLogger(__name__)

GENERATOR_VERSION = "1.0"
MANIFEST_NAME = "manifest.jsonl"
IMAGE_DIR = "images"
LABEL_DIR = "labels"


@dataclass(frozen=True, slots=True)
class ManifestEntry:
    record_id: str
    image_path: str
    label_path: str
    fg_id: str
    bg_id: str
    scale_ratio: float
    center: tuple[int, int]
    seed: int
    shift: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "image_path": self.image_path,
            "label_path": self.label_path,
            "fg_id": self.fg_id,
            "bg_id": self.bg_id,
            "scale_ratio": self.scale_ratio,
            "center": list(self.center),
            "seed": self.seed,
            "shift": self.shift,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> ManifestEntry:
        return cls(
            record_id=payload["record_id"],
            image_path=payload["image_path"],
            label_path=payload["label_path"],
            fg_id=payload["fg_id"],
            bg_id=payload["bg_id"],
            scale_ratio=float(payload["scale_ratio"]),
            center=(int(payload["center"][0]), int(payload["center"][1])),
            seed=int(payload["seed"]),
            shift=payload.get("shift"),
        )


@dataclass(slots=True)
class DatasetManifest:
    """Ordered record entries plus everything needed to regenerate them.

    ``records`` holds the in-memory composites right after generation; a
    manifest read back from disk has none.
    """

    split: str
    seed: int
    entries: list[ManifestEntry]
    canvas_dims: tuple[int, int] | None = None
    assets: dict[str, Any] = field(default_factory=dict)
    shift: dict[str, Any] | None = None
    evaluation_only: bool = False
    generator_version: str = GENERATOR_VERSION
    records: list[SynthRecord] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self) -> None:
        ids = [entry.record_id for entry in self.entries]
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError(f"Manifest {self.split!r} has duplicate record ids")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def record_ids(self) -> list[str]:
        return [entry.record_id for entry in self.entries]

    def header(self) -> dict[str, Any]:
        return {
            "kind": "header",
            "split": self.split,
            "seed": self.seed,
            "generator_version": self.generator_version,
            "canvas_dims": list(self.canvas_dims) if self.canvas_dims else None,
            "assets": self.assets,
            "shift": self.shift,
            "evaluation_only": self.evaluation_only,
            "n_records": len(self.entries),
        }

    def rows(self) -> list[dict[str, Any]]:
        return [self.header()] + [entry.to_dict() for entry in self.entries]

    def subset(self, split: str, start: int, stop: int | None = None) -> DatasetManifest:
        return replace(
            self,
            split=split,
            entries=self.entries[start:stop],
            records=self.records[start:stop],
        )


def write_dataset(manifest: DatasetManifest, root: Path) -> Path:
    """Write images, labels and ``manifest.jsonl`` for a freshly generated manifest."""
    if len(manifest.records) != len(manifest.entries):
        raise InvalidArgumentError(
            f"Manifest {manifest.split!r} carries {len(manifest.records)} records for "
            f"{len(manifest.entries)} entries; only freshly generated manifests can be written"
        )
    store = PersistentStore(root)
    for entry, record in zip(manifest.entries, manifest.records):
        store.write_png(entry.image_path, record.image)
        store.write_png(entry.label_path, record.label)
    path = store.write_jsonl(MANIFEST_NAME, manifest.rows())
    logger.info("Wrote %d %s records to %s", len(manifest), manifest.split, root)
    return path


def read_manifest(root: Path) -> DatasetManifest:
    store = PersistentStore(root)
    if not store.exists(MANIFEST_NAME):
        raise FileNotFoundError(f"No {MANIFEST_NAME} under {root}")
    rows = list(store.read_jsonl(MANIFEST_NAME))
    if not rows or rows[0].get("kind") != "header":
        raise InvalidArgumentError(f"{store.path(MANIFEST_NAME)} does not start with a header line")
    header = rows[0]
    canvas = header.get("canvas_dims")
    return DatasetManifest(
        split=header["split"],
        seed=int(header["seed"]),
        entries=[ManifestEntry.from_dict(row) for row in rows[1:]],
        canvas_dims=(int(canvas[0]), int(canvas[1])) if canvas else None,
        assets=header.get("assets") or {},
        shift=header.get("shift"),
        evaluation_only=bool(header.get("evaluation_only", False)),
        generator_version=header.get("generator_version", GENERATOR_VERSION),
    )


class DatasetReader:
    """Split-scoped access to a dataset directory.

    A reader opened with ``purpose="train"`` refuses to open labels of an
    evaluation-only split; only ``purpose="eval"`` readers may.
    """

    def __init__(self, root: Path, purpose: Literal["train", "eval"]) -> None:
        if purpose not in ("train", "eval"):
            raise InvalidArgumentError(f"purpose must be 'train' or 'eval', got {purpose!r}")
        self.root = Path(root)
        self.purpose = purpose
        self.store = PersistentStore(self.root)
        self.manifest = read_manifest(self.root)
        self._entries = {entry.record_id: entry for entry in self.manifest.entries}

    def __len__(self) -> int:
        return len(self.manifest)

    @property
    def record_ids(self) -> list[str]:
        return self.manifest.record_ids

    def entry(self, record_id: str) -> ManifestEntry:
        try:
            return self._entries[record_id]
        except KeyError as exc:
            raise InvalidArgumentError(f"Unknown record {record_id!r} in {self.root}") from exc

    def image(self, record_id: str) -> RgbImage:
        decoded = self.store.read_png(self.entry(record_id).image_path)
        if isinstance(decoded, RgbaImage):
            return RgbImage(decoded.pixels[:, :, :3].copy())
        if isinstance(decoded, GrayMap):
            raise InvalidArgumentError(f"Image for {record_id!r} is grayscale; RGB expected")
        return decoded

    def label(self, record_id: str) -> BinaryMask:
        if self.purpose == "train" and self.manifest.evaluation_only:
            raise LabelAccessError(
                f"Labels of split {self.manifest.split!r} are evaluation-only; "
                f"record {record_id!r} requested by a training reader"
            )
        entry = self.entry(record_id)
        if not self.store.exists(entry.label_path):
            raise MissingLabelError(record_id, str(self.store.path(entry.label_path)))
        decoded = self.store.read_png(entry.label_path)
        if not isinstance(decoded, GrayMap):
            raise InvalidArgumentError(f"Label for {record_id!r} is not a grayscale PNG")
        return BinaryMask.from_gray(decoded)

    def images(self) -> Iterator[tuple[str, RgbImage]]:
        for record_id in self.record_ids:
            yield record_id, self.image(record_id)
