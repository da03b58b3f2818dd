from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from saliency_adapt.core.imaging import BinaryMask, GrayMap, RgbaImage, RgbImage
from saliency_adapt.core.pngio import DecodedImage, decode_png, encode_png


class PersistentStore:
    """File-backed persistence for run artifacts: JSON, JSONL, CSV, PNG and raw bytes.

    Every write creates missing parent directories and lands atomically
    (temporary sibling file, then ``os.replace``).
    """

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, relative_path: str | Path) -> Path:
        return self.root / relative_path

    def exists(self, relative_path: str | Path) -> bool:
        return self.path(relative_path).exists()

    def write_bytes(self, relative_path: str | Path, payload: bytes) -> Path:
        path = self.path(relative_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)
        return path

    def read_bytes(self, relative_path: str | Path) -> bytes:
        return self.path(relative_path).read_bytes()

    def write_text(self, relative_path: str | Path, content: str) -> Path:
        return self.write_bytes(relative_path, content.encode("utf-8"))

    def read_json(self, relative_path: str | Path, default: Any) -> Any:
        path = self.path(relative_path)
        if not path.exists():
            return default
        return json.loads(path.read_text(encoding="utf-8"))

    def write_json(self, relative_path: str | Path, payload: Any) -> Path:
        return self.write_text(relative_path, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def write_jsonl(self, relative_path: str | Path, rows: Iterable[dict[str, Any]]) -> Path:
        lines = [json.dumps(row, sort_keys=True) for row in rows]
        return self.write_text(relative_path, "\n".join(lines) + "\n")

    def read_jsonl(self, relative_path: str | Path) -> Iterator[dict[str, Any]]:
        with self.path(relative_path).open("r", encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    yield json.loads(line)

    def write_csv(self, relative_path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return self.write_text(relative_path, buffer.getvalue())

    def write_png(self, relative_path: str | Path, image: RgbImage | RgbaImage | GrayMap | BinaryMask) -> Path:
        return self.write_bytes(relative_path, encode_png(image))

    def read_png(self, relative_path: str | Path) -> DecodedImage:
        return decode_png(self.read_bytes(relative_path))
