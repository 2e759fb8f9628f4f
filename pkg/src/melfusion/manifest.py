"""Dataset manifest records and their CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

MANIFEST_HEADER = ["id", "image_path", "mask_path", "label", "fold"]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SampleManifest:
    id: str
    image_path: str
    mask_path: str
    label: int
    fold: int = -1
    veil: int | None = None

    def with_fold(self, fold: int) -> "SampleManifest":
        return replace(self, fold=fold)


def validate_manifest(samples: list[SampleManifest], k: int | None = None) -> None:
    seen: set[str] = set()
    for s in samples:
        if not s.id:
            raise ManifestError("empty sample id")
        if s.id in seen:
            raise ManifestError(f"duplicate sample id {s.id!r}")
        seen.add(s.id)
        if not s.image_path or not s.mask_path:
            raise ManifestError(f"{s.id}: empty path")
        if s.label not in (0, 1):
            raise ManifestError(f"{s.id}: label must be 0 or 1, got {s.label}")
        if k is not None and not 0 <= s.fold < k:
            raise ManifestError(f"{s.id}: fold {s.fold} outside [0, {k})")


def read_manifest(path) -> list[SampleManifest]:
    """Load ``manifest.csv``; relative paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ManifestError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            veil = row.get("veil")
            samples.append(
                SampleManifest(
                    id=row["id"],
                    image_path=str(base / row["image_path"]),
                    mask_path=str(base / row["mask_path"]),
                    label=int(row["label"]),
                    fold=int(row["fold"]) if row["fold"] not in ("", None) else -1,
                    veil=int(veil) if veil not in (None, "") else None,
                )
            )
    validate_manifest(samples)
    return samples


def write_manifest(path, samples: list[SampleManifest], relative_to=None) -> None:
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    with_veil = any(s.veil is not None for s in samples)
    header = MANIFEST_HEADER + (["veil"] if with_veil else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in samples:
            row = [
                s.id,
                _rel(s.image_path, base),
                _rel(s.mask_path, base),
                s.label,
                s.fold,
            ]
            if with_veil:
                row.append("" if s.veil is None else s.veil)
            w.writerow(row)


def _rel(p: str, base: Path) -> str:
    try:
        return Path(p).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(p)


def stratified_kfold(samples: list[SampleManifest], k: int, seed: int) -> list[SampleManifest]:
    """Assign folds so per-class counts per fold differ by at most one.

    Samples are sorted by id before the seeded shuffle, so the result does
    not depend on input order.  Classes are dealt round-robin in sequence,
    which also keeps overall fold sizes within one of each other.
    """
    if k < 2:
        raise ManifestError("k must be at least 2")
    by_id = {s.id: s for s in samples}
    if len(by_id) != len(samples):
        raise ManifestError("duplicate sample ids")
    rng = np.random.default_rng(seed)
    assigned: dict[str, int] = {}
    offset = 0
    for label in (0, 1):
        ids = sorted(s.id for s in samples if s.label == label)
        if len(ids) < k:
            raise ManifestError(f"class {label} has {len(ids)} samples, fewer than k={k}")
        order = rng.permutation(len(ids))
        for pos, j in enumerate(order):
            assigned[ids[j]] = (offset + pos) % k
        offset += len(ids)
    return [s.with_fold(assigned[s.id]) for s in samples]
