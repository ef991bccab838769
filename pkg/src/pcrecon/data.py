"""Procedural dataset: shape populations, renders, clouds, manifest, split.

Each shape gets a ground-truth cloud (dense area-uniform surface sample,
farthest-point-sampled down to 2048, renormalized to the unit box) and 24
depth renders at 15-degree azimuth steps, elevation fixed at 20 degrees.
Everything derives deterministically from (dataset spec, seed), per-entry, so
builds are reproducible bit-for-bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import (PointCloud, RenderedView, farthest_point_sample,
                       generate_primitive, render_view, renormalize_unit_box,
                       sample_mesh_uniform, sample_primitive_params)
from .storage import read_pgm, read_xyz, write_pgm, write_tsv, write_xyz

GT_POINTS = 2048
OVERSAMPLE = 16                      # dense sample size = OVERSAMPLE * GT_POINTS
N_AZIMUTHS = 24
AZIMUTHS_DEG = tuple(float(a) for a in range(0, 360, 360 // N_AZIMUTHS))
ELEVATION_DEG = 20.0
TEST_FRACTION = 0.2
MIN_SHAPES_PER_CATEGORY = 5

# dataset category -> primitive generator kind
CATEGORY_KINDS = {"box": "box", "cylinder": "cylinder",
                  "chairlike": "chairlike", "tablelike": "tablelike",
                  "sphere": "sphere"}


@dataclass
class ManifestEntry:
    shape_id: str
    category: str
    gen_seed: int
    params: dict
    split: str                      # train | test
    cloud_path: str
    view_paths: list

    @property
    def azimuths(self):
        return AZIMUTHS_DEG


@dataclass
class DatasetManifest:
    root: str
    seed: int
    entries: list = field(default_factory=list)

    def by_split(self, split: str):
        return [e for e in self.entries if e.split == split]

    def categories(self):
        return sorted({e.category for e in self.entries})


def _entry_seed(seed: int, cat_index: int, i: int) -> int:
    # deterministic per-entry stream, independent of build order
    return (seed * 1_000_003 + cat_index * 10_007 + i) % (2**63)


def make_ground_truth_cloud(mesh, seed: int) -> PointCloud:
    dense = sample_mesh_uniform(mesh, OVERSAMPLE * GT_POINTS, seed)
    return renormalize_unit_box(farthest_point_sample(dense, GT_POINTS))


def split(entries, seed: int):
    """Per-category 80/20 partition by seeded shuffle of shape ids.

    All views of a shape stay on one side. Categories with fewer than 5
    shapes are rejected.
    """
    rng = np.random.default_rng(seed)
    by_cat: dict[str, list] = {}
    for e in entries:
        by_cat.setdefault(e.category, []).append(e)
    train, test = [], []
    for cat in sorted(by_cat):
        group = by_cat[cat]
        if len(group) < MIN_SHAPES_PER_CATEGORY:
            raise ValueError(f"split: category {cat!r} has {len(group)} shapes, "
                             f"need >= {MIN_SHAPES_PER_CATEGORY}")
        order = rng.permutation(len(group))
        n_test = max(1, int(round(TEST_FRACTION * len(group))))
        test_idx = set(order[:n_test].tolist())
        for i, e in enumerate(group):
            (test if i in test_idx else train).append(e)
    return train, test


def build_dataset(root: str, categories, count_per_category: int,
                  seed: int) -> DatasetManifest:
    """Generate shapes, clouds and views under root; write manifest.tsv.

    Individual generation failures are skipped and reported; more than 1%
    failures abort the build.
    """
    if count_per_category < MIN_SHAPES_PER_CATEGORY:
        raise ValueError(f"build_dataset: need >= {MIN_SHAPES_PER_CATEGORY} shapes "
                         f"per category, got {count_per_category}")
    os.makedirs(os.path.join(root, "clouds"), exist_ok=True)
    os.makedirs(os.path.join(root, "views"), exist_ok=True)
    entries = []
    failures = []
    total = 0
    for ci, cat in enumerate(categories):
        kind = CATEGORY_KINDS.get(cat)
        if kind is None:
            raise ValueError(f"build_dataset: unknown category {cat!r}; "
                             f"expected one of {sorted(CATEGORY_KINDS)}")
        for i in range(count_per_category):
            total += 1
            gseed = _entry_seed(seed, ci, i)
            shape_id = f"{cat}_{i:04d}"
            try:
                params = sample_primitive_params(kind, gseed)
                mesh = generate_primitive(kind, params, gseed)
                cloud = make_ground_truth_cloud(mesh, gseed + 1)
                cloud_path = os.path.join("clouds", f"{shape_id}.xyz")
                write_xyz(cloud, os.path.join(root, cloud_path))
                view_paths = []
                for az in AZIMUTHS_DEG:
                    view = render_view(mesh, az, ELEVATION_DEG)
                    vp = os.path.join("views", f"{shape_id}_az{int(az):03d}.pgm")
                    write_pgm(view, os.path.join(root, vp))
                    view_paths.append(vp)
            except Exception as exc:  # noqa: BLE001 - skip-and-report contract
                failures.append((shape_id, str(exc)))
                continue
            entries.append(ManifestEntry(shape_id, cat, gseed, params, "train",
                                         cloud_path, view_paths))
    if failures:
        detail = "; ".join(f"{sid}: {msg}" for sid, msg in failures[:5])
        if len(failures) > 0.01 * total:
            raise RuntimeError(f"build_dataset: {len(failures)}/{total} shapes failed "
                               f"({detail})")
        print(f"build_dataset: skipped {len(failures)}/{total} shapes ({detail})")

    train, test = split(entries, seed)
    test_ids = {e.shape_id for e in test}
    for e in entries:
        e.split = "test" if e.shape_id in test_ids else "train"
    manifest = DatasetManifest(root, seed, entries)
    _write_manifest(manifest)
    return manifest


def _write_manifest(manifest: DatasetManifest):
    rows = [(e.shape_id, e.category, e.gen_seed, e.split, e.cloud_path,
             ";".join(e.view_paths), json.dumps(e.params, sort_keys=True))
            for e in manifest.entries]
    write_tsv(os.path.join(manifest.root, "manifest.tsv"),
              ["shape_id", "category", "gen_seed", "split", "cloud", "views", "params"],
              rows)
    write_tsv(os.path.join(manifest.root, "dataset.tsv"),
              ["key", "value"],
              [("seed", manifest.seed), ("azimuths", ";".join(str(a) for a in AZIMUTHS_DEG)),
               ("elevation_deg", ELEVATION_DEG), ("gt_points", GT_POINTS)])


def load_manifest(root: str) -> DatasetManifest:
    from .storage import read_tsv
    header, rows = read_tsv(os.path.join(root, "manifest.tsv"))
    _, meta_rows = read_tsv(os.path.join(root, "dataset.tsv"))
    meta = dict(meta_rows)
    entries = []
    for sid, cat, gseed, spl, cloud, views, params in rows:
        entries.append(ManifestEntry(sid, cat, int(gseed), json.loads(params), spl,
                                     cloud, views.split(";")))
    return DatasetManifest(root, int(meta["seed"]), entries)


class Dataset:
    """Manifest plus cached lazy loading of clouds and views."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._clouds: dict[str, PointCloud] = {}
        self._views: dict[tuple, RenderedView] = {}

    @classmethod
    def open(cls, root: str):
        return cls(load_manifest(root))

    def cloud(self, entry: ManifestEntry) -> PointCloud:
        if entry.shape_id not in self._clouds:
            self._clouds[entry.shape_id] = read_xyz(
                os.path.join(self.manifest.root, entry.cloud_path))
        return self._clouds[entry.shape_id]

    def view(self, entry: ManifestEntry, az_index: int) -> RenderedView:
        key = (entry.shape_id, az_index)
        if key not in self._views:
            self._views[key] = read_pgm(
                os.path.join(self.manifest.root, entry.view_paths[az_index]))
        return self._views[key]

    def entries(self, split: str, category: str | None = None):
        out = self.manifest.by_split(split)
        if category:
            out = [e for e in out if e.category == category]
        return out

    def view_indices(self, views_per_shape: int):
        if not (1 <= views_per_shape <= N_AZIMUTHS):
            raise ValueError(f"views_per_shape must be in [1, {N_AZIMUTHS}]")
        return [round(j * N_AZIMUTHS / views_per_shape) % N_AZIMUTHS
                for j in range(views_per_shape)]

    def lm_samples(self, split: str, views_per_shape: int = N_AZIMUTHS,
                   category: str | None = None):
        """(RenderedView, PointCloud) pairs over an evenly spaced azimuth subset."""
        pairs = []
        for e in self.entries(split, category):
            cloud = self.cloud(e)
            for ai in self.view_indices(views_per_shape):
                pairs.append((self.view(e, ai), cloud))
        return pairs

    def cloud_list(self, split: str, category: str | None = None):
        return [self.cloud(e) for e in self.entries(split, category)]
