"""On-disk formats: PGRD rasters, tree annotation CSV, scene manifests.

PGRD layout (little-endian)::

    b"PGRD" | u16 version=1 | u32 width | u32 height | u16 bands | u8 dtype (0=f32)
    | 3 x f64 geotransform (origin_x, origin_y, pixel_size) | f32 nodata
    | band-major, row-major f32 payload

Nodata pixels carry the sentinel in every band.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from densal.raster import GeoTransform, RasterError, RasterGrid, TreeAnnotationSet

PGRD_MAGIC = b"PGRD"
PGRD_VERSION = 1
NODATA = -9999.0
_HEADER = struct.Struct("<4sHIIHB3df")


class FormatError(ValueError):
    pass


def write_pgrd(path, grid: RasterGrid, nodata: float = NODATA) -> None:
    vals = grid.values.astype("<f4")
    vals[:, grid.nodata_mask] = nodata
    head = _HEADER.pack(PGRD_MAGIC, PGRD_VERSION, grid.width, grid.height, grid.bands, 0,
                        *grid.geotransform.to_tuple(), nodata)
    Path(path).write_bytes(head + vals.tobytes())


def read_pgrd(path) -> RasterGrid:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: too short for a PGRD header")
    magic, version, width, height, bands, dtype, ox, oy, ps, nodata = _HEADER.unpack_from(data)
    if magic != PGRD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != PGRD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != 0:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    count = width * height * bands
    if len(data) != _HEADER.size + 4 * count:
        raise FormatError(f"{path}: payload size mismatch")
    vals = np.frombuffer(data, "<f4", count, _HEADER.size).reshape(bands, height, width)
    mask = np.all(vals == np.float32(nodata), axis=0)
    out = vals.astype(np.float64)
    out[:, mask] = 0.0
    try:
        return RasterGrid(out, GeoTransform(ox, oy, ps), mask)
    except RasterError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_trees_csv(path, sets) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["block_id", "x_m", "y_m"])
        for ts in sets:
            for x, y in ts.points:
                wr.writerow([ts.block_id, repr(float(x)), repr(float(y))])


def read_trees_csv(path, bounds: dict) -> dict[str, TreeAnnotationSet]:
    """Group points by block; ``bounds`` maps block_id -> (xmin, ymin, xmax, ymax)."""
    pts: dict[str, list] = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != ["block_id", "x_m", "y_m"]:
            raise FormatError(f"{path}: expected header block_id,x_m,y_m, got {rd.fieldnames}")
        for row in rd:
            pts.setdefault(row["block_id"], []).append((float(row["x_m"]), float(row["y_m"])))
    missing = set(pts) - set(bounds)
    if missing:
        raise FormatError(f"{path}: no bounds for blocks {sorted(missing)}")
    return {
        bid: TreeAnnotationSet(np.array(pts.get(bid, []), dtype=float).reshape(-1, 2), tuple(bounds[bid]), bid)
        for bid in bounds
    }


@dataclass
class SceneManifest:
    """One scene: its acquisitions plus labels, all sharing a geotransform."""

    scene_id: str
    timestamps: list[str]
    images: list[str]
    clouds: list[str]
    density: str | None = None
    cloud_band: int = 0
    meta: dict = field(default_factory=dict)

    def paths(self) -> list[str]:
        return self.images + self.clouds + ([self.density] if self.density else [])

    def validate(self, root) -> None:
        root = Path(root)
        if not (len(self.images) == len(self.clouds) == len(self.timestamps)):
            raise FormatError(f"scene {self.scene_id}: images/clouds/timestamps differ in length")
        gts = set()
        for p in self.paths():
            f = root / p
            if not f.exists():
                raise FormatError(f"scene {self.scene_id}: missing raster {f}")
            gts.add(read_pgrd_header(f)[1])
        if len(gts) > 1:
            raise FormatError(f"scene {self.scene_id}: rasters disagree on geotransform")


def read_pgrd_header(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    magic, version, width, height, bands, _, ox, oy, ps, _ = _HEADER.unpack(head)
    if magic != PGRD_MAGIC:
        raise FormatError(f"{path}: bad magic")
    return (width, height, bands), (ox, oy, ps)


def write_manifest(path, scenes: list[SceneManifest], extra: dict | None = None) -> None:
    doc = dict(extra or {})
    doc["scenes"] = [asdict(s) for s in scenes]
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_manifest(path) -> tuple[list[SceneManifest], dict]:
    doc = json.loads(Path(path).read_text())
    scenes = [SceneManifest(**s) for s in doc.pop("scenes")]
    return scenes, doc


def tree_digest(root) -> str:
    """SHA-256 over every file under ``root`` (relative path + bytes)."""
    h = hashlib.sha256()
    root = Path(root)
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()
