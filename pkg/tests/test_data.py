import numpy as np
import pytest

from tissuegen.data import (
    DatasetManifest,
    PatchRecord,
    build_ground_truth,
    build_pairs,
    build_synth_dataset,
    extract_patches,
    ingest_sources,
    read_manifest,
    read_rgb_png,
    render_rgb,
    rgb_to_grayscale,
    split_manifest,
    synth_corpus,
    write_manifest,
    write_rgb_png,
)
from tissuegen.masks import BinaryMask, coarsen, read_mask_png, tissue_fraction


def solid_rgb(h, w, value):
    return np.full((h, w, 3), value, dtype=np.uint8)


# ---------------------------------------------------------------- extraction

def test_grid_tiling_counts():
    src = solid_rgb(1024, 2048, 0)  # all dark = all tissue
    patches = extract_patches(src, 512, 1024, air_threshold=204)
    assert len(patches) == 4
    assert sorted(p[1] for p in patches) == [(0, 0), (0, 1024), (512, 0), (512, 1024)]


def test_pure_white_source_keeps_nothing():
    src = solid_rgb(1024, 2048, 255)
    assert extract_patches(src, 512, 1024, air_threshold=204) == []


def test_single_tissue_quadrant_retained():
    src = solid_rgb(64, 64, 255)
    src[:32, :32] = 20  # one all-tissue quadrant
    patches = extract_patches(src, 32, 32, air_threshold=204)
    assert [p[1] for p in patches] == [(0, 0)]


def test_boundary_patch_at_exact_limit_is_retained():
    # 20x20 patch with exactly 85% air: 340 air pixels of 400.
    src = solid_rgb(20, 20, 255)
    flat = src.reshape(-1, 3)
    flat[:60] = 20  # 60 tissue pixels -> air fraction 340/400 = 0.85
    patches = extract_patches(src, 20, 20, air_threshold=204, air_limit=0.85)
    assert len(patches) == 1


def test_patch_just_over_limit_is_excluded():
    src = solid_rgb(20, 20, 255)
    flat = src.reshape(-1, 3)
    flat[:59] = 20  # air fraction 341/400 > 0.85
    assert extract_patches(src, 20, 20, air_threshold=204, air_limit=0.85) == []


def test_source_smaller_than_patch_rejected():
    with pytest.raises(ValueError):
        extract_patches(solid_rgb(31, 64, 0), 32, 32, air_threshold=204)


def test_grayscale_weights():
    rgb = np.zeros((1, 3, 3), dtype=np.uint8)
    rgb[0, 0] = (255, 0, 0)
    rgb[0, 1] = (0, 255, 0)
    rgb[0, 2] = (0, 0, 255)
    gray = rgb_to_grayscale(rgb)
    assert gray[0, 0] == round(0.299 * 255)
    assert gray[0, 1] == round(0.587 * 255)
    assert gray[0, 2] == round(0.114 * 255)


# ---------------------------------------------------------------- pipeline

@pytest.fixture()
def tiny_dataset(tmp_path):
    return build_synth_dataset(tmp_path, "tiny", n=10, seed=3, h=24, w=24, n_test=2)


def test_synth_dataset_layout(tiny_dataset):
    m = tiny_dataset
    assert len(m.records) == 10
    assert len(m.split_records("test")) == 2
    for rec in m.records:
        assert m.resolve(rec.image_path).exists()
        assert m.resolve(rec.fine_mask_path).exists()
        assert m.resolve(rec.coarse_mask_path).exists()


def test_pairs_match_coarsen_bit_exactly(tiny_dataset):
    for rec in tiny_dataset.records:
        fine = read_mask_png(tiny_dataset.resolve(rec.fine_mask_path))
        coarse = read_mask_png(tiny_dataset.resolve(rec.coarse_mask_path))
        assert coarse == coarsen(fine)
        assert coarse.shape == fine.shape


def test_pipeline_idempotent(tiny_dataset):
    rec = tiny_dataset.records[0]
    coarse_path = tiny_dataset.resolve(rec.coarse_mask_path)
    before = coarse_path.read_bytes()
    build_pairs(tiny_dataset)
    assert coarse_path.read_bytes() == before


def test_ground_truth_uses_stain_threshold(tmp_path):
    # intensity 210 is tissue for IHC (235) but air for H&E (204)
    src_dir = tmp_path / "src"
    src_dir.mkdir()
    write_rgb_png(solid_rgb(16, 16, 210), src_dir / "a.png")
    m_ihc = ingest_sources(src_dir, tmp_path / "root1", "ihc_set", "IHC",
                           patch_h=16, patch_w=16)
    fine = read_mask_png(m_ihc.resolve(m_ihc.records[0].fine_mask_path))
    assert fine.plane.all()
    # under the H&E threshold the same patch is 100% air and gets excluded
    assert extract_patches(solid_rgb(16, 16, 210), 16, 16, air_threshold=204) == []


def test_all_white_patch_gives_empty_mask(tmp_path):
    mask = build_ground_truth_single(solid_rgb(8, 8, 255), 204)
    assert mask.plane.sum() == 0


def build_ground_truth_single(patch, threshold):
    from tissuegen.masks import binarize_grayscale
    return binarize_grayscale(rgb_to_grayscale(patch), threshold)


# ---------------------------------------------------------------- split

def make_manifest(n_records, records_per_source=1):
    records = []
    for i in range(n_records):
        records.append(PatchRecord(
            id=f"r{i:05d}", source_id=f"s{i // records_per_source:05d}",
            origin=(0, 0), image_path=f"images/r{i}.png",
            fine_mask_path=f"fine/r{i}.png", coarse_mask_path=f"coarse/r{i}.png",
            split="train"))
    return DatasetManifest(name="x", stain="H&E", air_threshold=204,
                           patch_height=16, patch_width=16, records=records)


def test_split_counts_and_disjointness():
    m = split_manifest(make_manifest(10), n_test=3, seed=0)
    test = m.split_records("test")
    train = m.split_records("train")
    assert len(test) == 3 and len(train) == 7
    assert not {r.id for r in test} & {r.id for r in train}


def test_split_deterministic():
    a = split_manifest(make_manifest(20), n_test=5, seed=11)
    b = split_manifest(make_manifest(20), n_test=5, seed=11)
    assert [r.split for r in a.records] == [r.split for r in b.records]


def test_split_prad_scale():
    m = split_manifest(make_manifest(6983), n_test=1000, seed=1)
    assert len(m.split_records("train")) == 5983
    assert len(m.split_records("test")) == 1000


def test_split_groups_stay_together():
    m = split_manifest(make_manifest(20, records_per_source=5), n_test=10, seed=2)
    by_source = {}
    for rec in m.records:
        by_source.setdefault(rec.source_id, set()).add(rec.split)
    assert all(len(v) == 1 for v in by_source.values())


def test_split_unreachable_target_names_group():
    with pytest.raises(ValueError, match="source group"):
        split_manifest(make_manifest(20, records_per_source=5), n_test=3, seed=2)


def test_split_rejects_bad_n_test():
    with pytest.raises(ValueError):
        split_manifest(make_manifest(5), n_test=5, seed=0)


# ---------------------------------------------------------------- synth corpus

def test_synth_corpus_deterministic_and_sized():
    a = synth_corpus(seed=8, n=6, h=32, w=48)
    b = synth_corpus(seed=8, n=6, h=32, w=48)
    assert len(a) == 6
    assert all(x == y for x, y in zip(a, b))
    assert all(m.shape == (32, 48) for m in a)
    assert synth_corpus(seed=8, n=0, h=32, w=48) == []


def test_synth_corpus_fraction_spread():
    masks = synth_corpus(seed=21, n=500, h=32, w=32)
    fracs = [tissue_fraction(m) for m in masks]
    assert min(fracs) <= 0.15
    assert max(fracs) >= 0.85


def test_render_rgb_bright_air_dark_tissue():
    plane = np.zeros((32, 32), dtype=np.uint8)
    plane[:16] = 1
    rgb = render_rgb(BinaryMask(plane), seed=5)
    air = rgb[16:].mean()
    tissue = rgb[:16].mean()
    assert air > 230
    assert tissue < 200


# ---------------------------------------------------------------- manifest io

def test_manifest_round_trip(tmp_path, tiny_dataset):
    path = tmp_path / "m.jsonl"
    write_manifest(tiny_dataset, path)
    back = read_manifest(path)
    assert back.name == tiny_dataset.name
    assert back.records == tiny_dataset.records
    assert back.base_dir == tmp_path


def test_manifest_rejects_split_leakage():
    m = make_manifest(4, records_per_source=2)
    leaked = [
        m.records[0],
        PatchRecord(**{**m.records[1].__dict__, "split": "test"}),
        m.records[2], m.records[3],
    ]
    bad = DatasetManifest(name="x", stain="H&E", air_threshold=204,
                          patch_height=16, patch_width=16, records=leaked)
    with pytest.raises(ValueError, match="both splits"):
        write_manifest(bad, "/tmp/never_written.jsonl")
