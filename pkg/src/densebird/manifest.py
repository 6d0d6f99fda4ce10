"""Item manifests (CSV), seeded train/valid/test splits and pseudo-label merging."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .metrics import PredictionSet

SOURCES = ("real", "pseudo")


@dataclass(frozen=True)
class ManifestRow:
    item_id: str
    label: int | None = None
    path: str = ""
    source: str = "real"


@dataclass
class Manifest:
    rows: list[ManifestRow] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            if r.item_id in seen:
                raise ValueError(f"duplicate item id {r.item_id!r}")
            if r.label not in (None, 0, 1):
                raise ValueError(f"{r.item_id}: label must be 0 or 1")
            if r.source not in SOURCES:
                raise ValueError(f"{r.item_id}: source must be one of {SOURCES}")
            seen.add(r.item_id)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @property
    def item_ids(self) -> list[str]:
        return [r.item_id for r in self.rows]

    def labels(self) -> dict[str, int]:
        return {r.item_id: r.label for r in self.rows if r.label is not None}

    def count(self, source: str) -> int:
        return sum(r.source == source for r in self.rows)


def read_manifest(path) -> Manifest:
    """Read 'itemid,hasbird[,path[,source]]'; an empty hasbird means unlabeled."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "itemid" not in reader.fieldnames:
            raise ValueError(f"{path}: expected a header starting with 'itemid'")
        rows = []
        for n, rec in enumerate(reader, start=2):
            raw = (rec.get("hasbird") or "").strip()
            try:
                label = int(raw) if raw else None
            except ValueError:
                raise ValueError(f"{path}:{n}: bad hasbird value {raw!r}") from None
            rows.append(ManifestRow(rec["itemid"], label, (rec.get("path") or "").strip(),
                                    (rec.get("source") or "real").strip()))
    return Manifest(rows)


def write_manifest(path, manifest: Manifest) -> None:
    with_path = any(r.path for r in manifest)
    with_source = any(r.source != "real" for r in manifest)
    header = ["itemid", "hasbird"]
    if with_path or with_source:
        header.append("path")
    if with_source:
        header.append("source")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in manifest:
            row = [r.item_id, "" if r.label is None else r.label]
            if len(header) > 2:
                row.append(r.path)
            if len(header) > 3:
                row.append(r.source)
            writer.writerow(row)


@dataclass
class SplitSpec:
    train: float = 0.8
    valid: float = 0.05
    test: float = 0.15
    seed: int = 1234

    def __post_init__(self):
        props = (self.train, self.valid, self.test)
        if min(props) < 0:
            raise ValueError("split proportions must be non-negative")
        if abs(sum(props) - 1.0) > 1e-9:
            raise ValueError(f"split proportions sum to {sum(props)}, not 1")


def split_manifest(manifest: Manifest, spec: SplitSpec) -> tuple[Manifest, Manifest, Manifest]:
    """Seeded shuffle, then train/valid counts rounded down and the rest to test."""
    n = len(manifest)
    if n == 0:
        raise ValueError("cannot split an empty manifest")
    order = np.random.default_rng(spec.seed).permutation(n)
    rows = [manifest.rows[i] for i in order]
    # The small epsilon keeps exact products such as 0.8 * 7690 from
    # rounding down to 6151.
    n_train = min(n, math.floor(spec.train * n + 1e-9))
    n_valid = min(n - n_train, math.floor(spec.valid * n + 1e-9))
    return (Manifest(rows[:n_train]), Manifest(rows[n_train:n_train + n_valid]),
            Manifest(rows[n_train + n_valid:]))


def concat_manifests(*parts: Manifest) -> Manifest:
    return Manifest([r for m in parts for r in m])


def merge_pseudo_into_training(train: Manifest, pseudo: PredictionSet,
                               paths: dict[str, str] | None = None) -> Manifest:
    """Append pseudo-labelled items, flagged source=pseudo, to a training manifest."""
    if pseudo.labels is None:
        raise ValueError("pseudo-label set carries no labels")
    existing = set(train.item_ids)
    clash = [i for i in pseudo.item_ids if i in existing]
    if clash:
        raise ValueError(f"{len(clash)} pseudo-labelled ids already in the training set, e.g. {clash[0]!r}")
    paths = paths or {}
    extra = [ManifestRow(i, int(y), paths.get(i, ""), "pseudo")
             for i, y in zip(pseudo.item_ids, pseudo.labels)]
    return Manifest([replace(r) for r in train] + extra)
