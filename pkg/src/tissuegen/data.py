"""Dataset construction: patch extraction, ground-truth masks, coarse-fine pairs,
train/test splits, and procedural desk-scale corpora.

Directory layout per dataset: <root>/<dataset>/{images,fine,coarse}/<id>.png with
a line-delimited manifest at <root>/<dataset>/manifest.jsonl (header line followed
by one record object per line).
"""
from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .masks import BinaryMask, binarize_grayscale, coarsen, mask_to_png_bytes, \
    read_mask_png, tissue_fraction, write_mask_png

__all__ = [
    "STAIN_THRESHOLDS",
    "PatchRecord",
    "PairSample",
    "DatasetManifest",
    "rgb_to_grayscale",
    "extract_patches",
    "build_ground_truth",
    "build_pairs",
    "split_manifest",
    "synth_corpus",
    "render_rgb",
    "build_synth_dataset",
    "ingest_sources",
    "write_manifest",
    "read_manifest",
    "write_rgb_png",
    "read_rgb_png",
]

# Air thresholds per staining technique, 8-bit grayscale.
STAIN_THRESHOLDS = {"H&E": 204, "IHC": 235}

DEFAULT_AIR_LIMIT = 0.85


@dataclass(frozen=True)
class PairSample:
    """A coarse mask and its fine counterpart at identical dimensions."""

    coarse: BinaryMask
    fine: BinaryMask

    def __post_init__(self):
        if self.coarse.shape != self.fine.shape:
            raise ValueError(f"pair dimensions differ: coarse {self.coarse.shape} "
                             f"vs fine {self.fine.shape}")


@dataclass(frozen=True)
class PatchRecord:
    id: str
    source_id: str
    origin: tuple[int, int]  # (row, col) offset in the source image
    image_path: str
    fine_mask_path: str
    coarse_mask_path: str
    split: str  # "train" | "test"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")


@dataclass
class DatasetManifest:
    name: str
    stain: str
    air_threshold: int
    patch_height: int
    patch_width: int
    records: list[PatchRecord] = field(default_factory=list)
    base_dir: Path | None = None  # set when read from disk; not serialized

    def __post_init__(self):
        if self.stain not in STAIN_THRESHOLDS:
            raise ValueError(f"stain must be one of {sorted(STAIN_THRESHOLDS)}, got {self.stain!r}")
        if not 0 <= self.air_threshold <= 255:
            raise ValueError(f"air_threshold must be in [0, 255], got {self.air_threshold}")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate record ids in manifest")

    def split_records(self, split: str) -> list[PatchRecord]:
        return [r for r in self.records if r.split == split]

    def resolve(self, rel_path: str) -> Path:
        if self.base_dir is None:
            raise ValueError("manifest has no base_dir; read it from disk or set one")
        return self.base_dir / rel_path


def rgb_to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Luminance conversion with 0.299/0.587/0.114 weights, rounded to uint8."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected HxWx3 RGB array, got shape {rgb.shape}")
    lum = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    return np.clip(np.rint(lum), 0, 255).astype(np.uint8)


def extract_patches(source_image: np.ndarray, patch_h: int, patch_w: int,
                    air_threshold: int, air_limit: float = DEFAULT_AIR_LIMIT,
                    ) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """Tile a source RGB image into non-overlapping patches, dropping mostly-air ones.

    A patch is excluded iff its air fraction strictly exceeds `air_limit`
    (a patch at exactly the limit is retained).
    """
    source_image = np.asarray(source_image)
    if not 0.0 < air_limit <= 1.0:
        raise ValueError(f"air_limit must be in (0, 1], got {air_limit}")
    h, w = source_image.shape[:2]
    if h < patch_h or w < patch_w:
        raise ValueError(
            f"source {h}x{w} smaller than one {patch_h}x{patch_w} patch"
        )
    kept = []
    for row in range(0, h - patch_h + 1, patch_h):
        for col in range(0, w - patch_w + 1, patch_w):
            patch = source_image[row:row + patch_h, col:col + patch_w]
            mask = binarize_grayscale(rgb_to_grayscale(patch), air_threshold)
            air_fraction = 1.0 - tissue_fraction(mask)
            if air_fraction > air_limit:
                continue
            kept.append((patch, (row, col)))
    return kept


def build_ground_truth(manifest: DatasetManifest) -> None:
    """Write the fine tissue mask for every record: grayscale + air threshold."""
    for rec in manifest.records:
        patch = read_rgb_png(manifest.resolve(rec.image_path))
        mask = binarize_grayscale(rgb_to_grayscale(patch), manifest.air_threshold)
        path = manifest.resolve(rec.fine_mask_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_mask_png(mask, path)


def build_pairs(manifest: DatasetManifest) -> None:
    """Write the coarse mask for every record as coarsen(fine_mask)."""
    for rec in manifest.records:
        fine = read_mask_png(manifest.resolve(rec.fine_mask_path))
        path = manifest.resolve(rec.coarse_mask_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_mask_png(coarsen(fine), path)


def split_manifest(manifest: DatasetManifest, n_test: int, seed: int) -> DatasetManifest:
    """Assign train/test splits, keeping all records of a source on one side.

    Source groups are shuffled deterministically and accumulated into the test
    split first-fit until it holds exactly `n_test` records. Raises if no
    combination of whole groups reaches `n_test`.
    """
    total = len(manifest.records)
    if not 0 < n_test < total:
        raise ValueError(f"n_test must be in (0, {total}), got {n_test}")
    groups: dict[str, list[PatchRecord]] = {}
    for rec in manifest.records:
        groups.setdefault(rec.source_id, []).append(rec)
    order = sorted(groups)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    test_sources: set[str] = set()
    count = 0
    for src in order:
        size = len(groups[src])
        if count + size <= n_test:
            test_sources.add(src)
            count += size
            if count == n_test:
                break
    if count != n_test:
        deficit = n_test - count
        remaining = [s for s in order if s not in test_sources]
        offender = min(remaining, key=lambda s: len(groups[s]))
        raise ValueError(
            f"cannot reach n_test={n_test} without splitting a source group: "
            f"{deficit} records short, smallest remaining group "
            f"{offender!r} has {len(groups[offender])} records"
        )
    records = [
        replace(rec, split="test" if rec.source_id in test_sources else "train")
        for rec in manifest.records
    ]
    return replace(manifest, records=records)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, scale: int) -> np.ndarray:
    """Bilinearly upsampled coarse Gaussian grid: a smooth random field."""
    gh = max(2, h // scale + 2)
    gw = max(2, w // scale + 2)
    grid = rng.normal(size=(gh, gw))
    rows = np.linspace(0, gh - 1, h)
    cols = np.linspace(0, gw - 1, w)
    r0 = np.floor(rows).astype(int).clip(0, gh - 2)
    c0 = np.floor(cols).astype(int).clip(0, gw - 2)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c0 + 1] * fc
    bot = grid[r0 + 1][:, c0] * (1 - fc) + grid[r0 + 1][:, c0 + 1] * fc
    return top * (1 - fr) + bot * fr


def synth_corpus(seed: int, n: int, h: int, w: int) -> list[BinaryMask]:
    """Procedural blob/ridge masks with tissue fractions spread over [0.1, 0.9]."""
    masks = []
    seeds = np.random.SeedSequence(seed).spawn(n)
    for i in range(n):
        rng = np.random.default_rng(seeds[i])
        target = rng.uniform(0.1, 0.9)
        scale = int(rng.integers(6, 17))
        field_ = _smooth_noise(rng, h, w, scale)
        if rng.random() < 0.3:
            # ridge style: band around the median level
            dev = np.abs(field_ - np.median(field_))
            thr = np.quantile(dev, target)
            plane = (dev <= thr).astype(np.uint8)
        else:
            thr = np.quantile(field_, 1.0 - target)
            plane = (field_ >= thr).astype(np.uint8)
        masks.append(BinaryMask(plane))
    return masks


# Nominal stain colors for the procedural renderer (tissue mean RGB).
_STAIN_TISSUE_RGB = {"H&E": (190, 105, 170), "IHC": (160, 110, 70)}


def render_rgb(fine: BinaryMask, seed: int, stain: str = "H&E") -> np.ndarray:
    """Procedural RGB rendering of a fine mask: stain-colored tissue on bright air."""
    if stain not in _STAIN_TISSUE_RGB:
        raise ValueError(f"stain must be one of {sorted(_STAIN_TISSUE_RGB)}, got {stain!r}")
    rng = np.random.default_rng(seed)
    h, w = fine.shape
    texture = _smooth_noise(rng, h, w, 4)
    texture = texture / max(np.abs(texture).max(), 1e-9)
    out = np.empty((h, w, 3), dtype=np.float64)
    base = _STAIN_TISSUE_RGB[stain]
    for c in range(3):
        tissue = base[c] + 35.0 * texture + rng.normal(0, 6.0, size=(h, w))
        air = 248.0 + rng.normal(0, 3.0, size=(h, w))
        out[:, :, c] = np.where(fine.plane == 1, tissue, air)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _record_paths(rec_id: str) -> dict[str, str]:
    return {
        "image_path": f"images/{rec_id}.png",
        "fine_mask_path": f"fine/{rec_id}.png",
        "coarse_mask_path": f"coarse/{rec_id}.png",
    }


def build_synth_dataset(root: Path | str, name: str, n: int, seed: int,
                        h: int = 64, w: int = 128, stain: str = "H&E",
                        n_test: int | None = None) -> DatasetManifest:
    """Write a full procedural dataset: rendered images, fine masks, coarse pairs."""
    root = Path(root)
    dataset_dir = root / name
    for sub in ("images", "fine", "coarse"):
        (dataset_dir / sub).mkdir(parents=True, exist_ok=True)
    fines = synth_corpus(seed, n, h, w)
    records = []
    for i, fine in enumerate(fines):
        rec_id = f"synth_{i:05d}"
        paths = _record_paths(rec_id)
        write_mask_png(fine, dataset_dir / paths["fine_mask_path"])
        write_rgb_png(render_rgb(fine, seed=seed + 7919 * (i + 1), stain=stain),
                      dataset_dir / paths["image_path"])
        records.append(PatchRecord(id=rec_id, source_id=rec_id, origin=(0, 0),
                                   split="train", **paths))
    manifest = DatasetManifest(name=name, stain=stain,
                               air_threshold=STAIN_THRESHOLDS[stain],
                               patch_height=h, patch_width=w, records=records)
    manifest.base_dir = dataset_dir
    if n_test is None:
        n_test = max(1, n // 5)
    manifest = split_manifest(manifest, n_test=n_test, seed=seed)
    build_pairs(manifest)
    write_manifest(manifest, dataset_dir / "manifest.jsonl")
    return manifest


def ingest_sources(source_dir: Path | str, root: Path | str, name: str, stain: str,
                   patch_h: int = 512, patch_w: int = 1024,
                   air_limit: float = DEFAULT_AIR_LIMIT,
                   air_threshold: int | None = None,
                   n_test: int | None = None, seed: int = 0) -> DatasetManifest:
    """Patch every source image, write retained patches and their fine masks."""
    source_dir = Path(source_dir)
    if air_threshold is None:
        air_threshold = STAIN_THRESHOLDS[stain]
    sources = sorted(p for p in source_dir.iterdir()
                     if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not sources:
        raise ValueError(f"no source images (png/jpg) found in {source_dir}")
    dataset_dir = Path(root) / name
    for sub in ("images", "fine", "coarse"):
        (dataset_dir / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for src in sources:
        image = read_rgb_png(src)
        for patch, (row, col) in extract_patches(image, patch_h, patch_w,
                                                 air_threshold, air_limit):
            rec_id = f"{src.stem}_r{row}_c{col}"
            paths = _record_paths(rec_id)
            write_rgb_png(patch, dataset_dir / paths["image_path"])
            records.append(PatchRecord(id=rec_id, source_id=src.stem,
                                       origin=(row, col), split="train", **paths))
    manifest = DatasetManifest(name=name, stain=stain, air_threshold=air_threshold,
                               patch_height=patch_h, patch_width=patch_w,
                               records=records)
    manifest.base_dir = dataset_dir
    build_ground_truth(manifest)
    if n_test is not None:
        manifest = split_manifest(manifest, n_test=n_test, seed=seed)
    write_manifest(manifest, dataset_dir / "manifest.jsonl")
    return manifest


_HEADER_KEYS = ("name", "stain", "air_threshold", "patch_height", "patch_width")
_RECORD_KEYS = ("id", "source_id", "origin", "image_path", "fine_mask_path",
                "coarse_mask_path", "split")


def write_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    """Line-delimited manifest: one header object, then one object per record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _validate_split_disjoint(manifest)
    lines = [json.dumps({k: getattr(manifest, k) for k in _HEADER_KEYS})]
    for rec in manifest.records:
        row = {k: getattr(rec, k) for k in _RECORD_KEYS}
        row["origin"] = list(rec.origin)
        lines.append(json.dumps(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: Path | str) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"empty manifest file {path}")
    header = json.loads(lines[0])
    records = []
    for line in lines[1:]:
        if not line.strip():
            continue
        row = json.loads(line)
        row["origin"] = tuple(row["origin"])
        records.append(PatchRecord(**row))
    manifest = DatasetManifest(records=records, **header)
    manifest.base_dir = path.parent
    _validate_split_disjoint(manifest)
    return manifest


def _validate_split_disjoint(manifest: DatasetManifest) -> None:
    train_sources = {r.source_id for r in manifest.records if r.split == "train"}
    test_sources = {r.source_id for r in manifest.records if r.split == "test"}
    overlap = train_sources & test_sources
    if overlap:
        raise ValueError(f"sources present in both splits: {sorted(overlap)[:5]}")


def write_rgb_png(rgb: np.ndarray, path: Path | str) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def read_rgb_png(path: Path | str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def rgb_to_png_bytes(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()
