"""Dataset manifest: the binding between wells, labels, folds, and paths.

The manifest (``manifest.json`` at the dataset root) lists one record per
well.  Stage outputs (preprocessed frames, segmentation, features, models,
reports) are laid out under the same root by convention; `layout` builds
those paths so every stage agrees on them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"


@dataclass
class WellRecord:
    """One well: timelapse paths, ATP label, and fold assignment."""

    well_id: str
    atp: float
    fold: int
    paths: dict = field(default_factory=dict)


@dataclass
class Manifest:
    wells: list[WellRecord]
    frames: int
    z_levels: int
    quadrant_overlap: int
    config_hash: str = ""
    version: str = __version__
    extra: dict = field(default_factory=dict)

    def well_ids(self) -> list[str]:
        return [w.well_id for w in self.wells]

    def by_id(self, well_id: str) -> WellRecord:
        for w in self.wells:
            if w.well_id == well_id:
                return w
        raise KeyError(f"well {well_id!r} not in manifest")


def config_hash(config_dict: dict) -> str:
    """Stable short hash of a JSON-serializable config."""
    blob = json.dumps(config_dict, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def subseed(root_seed: int, stage: str) -> int:
    """Stable per-stage seed derived from one root seed."""
    digest = hashlib.sha256(f"{root_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def save_manifest(root, manifest: Manifest) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    doc = {
        "version": manifest.version,
        "config_hash": manifest.config_hash,
        "frames": manifest.frames,
        "z_levels": manifest.z_levels,
        "quadrant_overlap": manifest.quadrant_overlap,
        "wells": [
            {"well_id": w.well_id, "atp": w.atp, "fold": w.fold, "paths": w.paths}
            for w in manifest.wells
        ],
        "extra": manifest.extra,
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def load_manifest(root) -> Manifest:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
    doc = json.loads(path.read_text())
    wells = [
        WellRecord(w["well_id"], float(w["atp"]), int(w["fold"]), dict(w["paths"]))
        for w in doc["wells"]
    ]
    return Manifest(
        wells=wells,
        frames=int(doc["frames"]),
        z_levels=int(doc["z_levels"]),
        quadrant_overlap=int(doc["quadrant_overlap"]),
        config_hash=doc.get("config_hash", ""),
        version=doc.get("version", ""),
        extra=doc.get("extra", {}),
    )


class layout:
    """Path conventions for stage outputs under a dataset root."""

    @staticmethod
    def raw_quadrant(root, well_id: str, frame: int, quadrant: int, z: int) -> Path:
        return Path(root) / well_id / f"frame_{frame:03d}" / f"q{quadrant}_z{z}.pgm"

    @staticmethod
    def gt_dir(root, well_id: str) -> Path:
        return Path(root) / well_id / "gt"

    @staticmethod
    def preprocessed_dir(root, well_id: str) -> Path:
        return Path(root) / "preprocessed" / well_id

    @staticmethod
    def preprocessed_frame(root, well_id: str, frame: int) -> Path:
        return layout.preprocessed_dir(root, well_id) / f"frame_{frame:03d}.pgm"

    @staticmethod
    def segmentation_dir(root, well_id: str) -> Path:
        return Path(root) / "segmentation" / well_id

    @staticmethod
    def features_path(root, well_id: str) -> Path:
        return Path(root) / "features" / f"{well_id}.otfc"

    @staticmethod
    def models_dir(root) -> Path:
        return Path(root) / "models"

    @staticmethod
    def reports_dir(root) -> Path:
        return Path(root) / "reports"
