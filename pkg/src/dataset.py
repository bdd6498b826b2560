"""Dataset files: canonical JSON documents, run-length masks and manifests.

Each plant-view sequence is one JSON document (see ``PlantSequence``); a
directory of documents is described by ``manifest.json`` holding the seed,
the generating config hash and a SHA-256 per file.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type

import numpy as np
from pydantic import BaseModel, Field

from .core import BranchTrackError
from .schemas import Bud, Frame, MotionState, PlantSequence, RLEMask, TrackSet

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

# field name -> (container kind, nested model) for lenient key stripping
_NESTED: Dict[Type[BaseModel], Dict[str, Tuple[str, Type[BaseModel]]]] = {
    PlantSequence: {"frames": ("list", Frame), "gt_tracks": ("one", TrackSet)},
    Frame: {"buds": ("list", Bud), "masks": ("dict", RLEMask)},
    Bud: {"motion": ("one", MotionState)},
}


class ManifestMismatchError(BranchTrackError):
    """Raised when files do not belong to the dataset they claim to."""

    def __init__(self, message: str, expected: Optional[str] = None, actual: Optional[str] = None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class Manifest(BaseModel):
    """Dataset manifest written next to the sequence documents."""

    seed: int
    config_hash: str
    files: Dict[str, str] = Field(default_factory=dict, description="file name -> sha256")
    dataset_hash: str = ""

    def compute_dataset_hash(self) -> str:
        joined = "\n".join(f"{name}:{digest}" for name, digest in sorted(self.files.items()))
        return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def _drop_unknown(data: Any, model: Type[BaseModel], path: str, dropped: List[str]) -> Any:
    if not isinstance(data, dict):
        return data
    known = set(model.model_fields)
    cleaned = {}
    for key, value in data.items():
        if key not in known:
            dropped.append(f"{path}.{key}" if path else key)
            continue
        nested = _NESTED.get(model, {}).get(key)
        if nested is not None and value is not None:
            kind, child = nested
            if kind == "list":
                value = [
                    _drop_unknown(v, child, f"{path}.{key}[{i}]".lstrip("."), dropped)
                    for i, v in enumerate(value)
                ]
            elif kind == "dict":
                value = {
                    k: _drop_unknown(v, child, f"{path}.{key}[{k}]".lstrip("."), dropped)
                    for k, v in value.items()
                }
            else:
                value = _drop_unknown(value, child, f"{path}.{key}".lstrip("."), dropped)
        cleaned[key] = value
    return cleaned


def serialize_sequence(seq: PlantSequence) -> str:
    """Canonical JSON text (declared field order, compact separators)."""
    return json.dumps(seq.model_dump(mode="json"), separators=(",", ":"))


def deserialize_sequence(text: str, strict: bool = True) -> PlantSequence:
    """Parse a sequence document.

    Args:
        text: JSON document text
        strict: Reject unknown keys when True; drop them (with a warning) otherwise

    Returns:
        Parsed PlantSequence

    Raises:
        pydantic.ValidationError: If the document does not match the schema
    """
    data = json.loads(text)
    if not strict:
        dropped: List[str] = []
        data = _drop_unknown(data, PlantSequence, "", dropped)
        if dropped:
            logger.warning(f"Lenient schema: ignored unknown keys {dropped}")
    return PlantSequence.model_validate(data)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_dataset(
    sequences: List[PlantSequence], out_dir: Path, seed: int, config_hash: str
) -> Manifest:
    """Write one document per sequence plus the manifest.

    Returns:
        The manifest that was written
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(seed=seed, config_hash=config_hash)
    for seq in sequences:
        text = serialize_sequence(seq)
        name = f"{seq.stem}.json"
        (out_dir / name).write_text(text, encoding="utf-8")
        manifest.files[name] = sha256_text(text)
    manifest.dataset_hash = manifest.compute_dataset_hash()
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8"
    )
    logger.info(f"Wrote {len(sequences)} sequences to {out_dir}")
    return manifest


def read_manifest(data_dir: Path) -> Manifest:
    return Manifest.model_validate_json((Path(data_dir) / MANIFEST_NAME).read_text(encoding="utf-8"))


def read_dataset(data_dir: Path, strict: bool = True) -> Tuple[Manifest, List[PlantSequence]]:
    """Load every document listed in the manifest, verifying file hashes.

    Raises:
        ManifestMismatchError: If a file's content hash differs from the manifest
    """
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    sequences = []
    for name in sorted(manifest.files):
        text = (data_dir / name).read_text(encoding="utf-8")
        digest = sha256_text(text)
        if digest != manifest.files[name]:
            raise ManifestMismatchError(
                f"{name} does not match its manifest hash", expected=manifest.files[name], actual=digest
            )
        sequences.append(deserialize_sequence(text, strict=strict))
    return manifest, sequences


def encode_rle(mask: np.ndarray) -> RLEMask:
    """Run-length encode a binary mask in row-major order, starting with a zero run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    counts: List[int] = []
    if flat.size:
        changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate(([0], changes, [flat.size]))
        runs = np.diff(bounds).tolist()
        if flat[0]:
            runs = [0] + runs
        counts = [int(r) for r in runs]
    return RLEMask(size=(int(mask.shape[0]), int(mask.shape[1])), counts=counts)


def decode_rle(rle: RLEMask) -> np.ndarray:
    """Inverse of encode_rle."""
    h, w = rle.size
    values = np.zeros(h * w, dtype=bool)
    pos = 0
    fill = False
    for run in rle.counts:
        if fill:
            values[pos:pos + run] = True
        pos += run
        fill = not fill
    return values.reshape(h, w)
