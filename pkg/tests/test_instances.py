import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivit.config import IViTConfig
from ivit.instances import (
    EmptyBagError,
    Nucleus,
    RoiRecord,
    build_bag,
    compute_morphology,
    crop_patch,
    decode_rle,
    encode_rle,
    grid_position,
    iter_manifest,
    read_manifest,
    select_top_k,
    write_manifest,
)
from ivit.numerics import ContractError

from conftest import make_nucleus


def test_crop_window_interior():
    image = np.arange(3 * 200 * 200, dtype=np.float64).reshape(3, 200, 200)
    roi = RoiRecord(image, [], "type1", "r")
    patch = crop_patch(roi, make_nucleus(100, 100), 64)
    np.testing.assert_array_equal(patch, image[:, 68:132, 68:132])


def test_crop_zero_fill_at_border():
    image = np.ones((3, 200, 200))
    roi = RoiRecord(image, [], "type1", "r")
    patch = crop_patch(roi, make_nucleus(10, 10), 64)
    # rows -22..41: 22 zero rows on top, likewise 22 zero columns on the left
    assert np.all(patch[:, :22, :] == 0) and np.all(patch[:, :, :22] == 0)
    assert np.all(patch[:, 22:, 22:] == 1)


def test_crop_floors_fractional_centre():
    image = np.random.default_rng(0).uniform(size=(3, 50, 50))
    roi = RoiRecord(image, [], "type1", "r")
    a = crop_patch(roi, make_nucleus(20.9, 30.2), 8)
    np.testing.assert_array_equal(a, image[:, 26:34, 16:24])


@pytest.mark.parametrize("P", [7, 6, 9])
def test_crop_rejects_bad_patch_size(P):
    roi = RoiRecord(np.zeros((3, 20, 20)), [], "type1", "r")
    with pytest.raises(ContractError):
        crop_patch(roi, make_nucleus(5, 5), P)


def test_crop_deterministic(small_roi):
    n = small_roi.nuclei[0]
    assert crop_patch(small_roi, n, 16).tobytes() == crop_patch(small_roi, n, 16).tobytes()


def test_morphology_single_pixel():
    assert compute_morphology([[4, 5]]) == (1.0, 0.0, 0.0)


def test_morphology_strip():
    strip = [[0, c] for c in range(9)]
    # covariance of 0..8 is 60/9 = 20/3, computed by brute-force moments
    xs = np.arange(9.0)
    var = ((xs - xs.mean()) ** 2).sum() / 9
    assert var == pytest.approx(20 / 3)
    area, major, minor = compute_morphology(strip)
    assert area == 9
    assert major == pytest.approx(4 * math.sqrt(20 / 3), abs=1e-12)
    assert major == pytest.approx(10.33, abs=5e-3)
    assert minor == pytest.approx(0.0, abs=1e-12)


def test_morphology_disc_axes_match():
    r = 12
    rr, cc = np.mgrid[-r : r + 1, -r : r + 1]
    inside = rr**2 + cc**2 <= r**2
    area, major, minor = compute_morphology(np.stack([rr[inside], cc[inside]], axis=1))
    assert area == inside.sum()
    assert abs(major - minor) / major < 0.02


def test_morphology_empty_rejected():
    with pytest.raises(ContractError):
        compute_morphology(np.zeros((0, 2)))


def test_grid_position_examples():
    assert grid_position((1234, 56), 20) == (61, 2)
    assert grid_position((0, 0)) == (0, 0)
    assert grid_position((1999.9, 1999.9)) == (99, 99)


def _paper_rank_example():
    return [
        make_nucleus(1, 1, "grade2", 50),
        make_nucleus(2, 2, "grade3", 10),
        make_nucleus(3, 3, "endothelial", 99),
        make_nucleus(4, 4, "grade1", 80),
        make_nucleus(5, 5, "grade3", 40),
    ]


def test_select_top_k_example():
    out = select_top_k(_paper_rank_example(), 3)
    assert [(n.kind, n.area) for n in out] == [("grade3", 40), ("grade3", 10), ("grade2", 50)]


def test_select_top_k_more_than_available():
    out = select_top_k(_paper_rank_example(), 10)
    assert len(out) == 4 and all(n.kind != "endothelial" for n in out)


def test_select_top_k_tie_break_by_position():
    a = make_nucleus(5, 9, "grade2", 30)
    b = make_nucleus(7, 3, "grade2", 30)
    c = make_nucleus(2, 3, "grade2", 30)
    assert select_top_k([a, b, c], 3) == [c, b, a]


def test_select_top_k_no_tumor():
    with pytest.raises(EmptyBagError):
        select_top_k([make_nucleus(1, 1, "endothelial")], 3)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(st.sampled_from(["grade1", "grade2", "grade3", "endothelial"]),
                  st.integers(1, 6), st.integers(0, 5), st.integers(0, 5)),
        min_size=1, max_size=25,
    ),
    st.integers(1, 30),
    st.randoms(use_true_random=False),
)
def test_select_top_k_order_free_and_sorted(spec, N, rnd):
    nuclei = [make_nucleus(cx, cy, kind, area) for kind, area, cx, cy in spec]
    if not any(n.is_tumor for n in nuclei):
        return
    out = select_top_k(nuclei, N)
    shuffled = list(nuclei)
    rnd.shuffle(shuffled)
    again = select_top_k(shuffled, N)
    assert [(n.grade, n.area, n.cy, n.cx) for n in out] == [(n.grade, n.area, n.cy, n.cx) for n in again]
    assert len(out) == min(N, sum(n.is_tumor for n in nuclei))
    keys = [(n.grade, n.area) for n in out]
    assert all(keys[i] >= keys[i + 1] for i in range(len(keys) - 1))


def test_build_bag_pads(small_roi):
    cfg = IViTConfig(P=16, N=6, D=8, heads=2, layers=1, grid_w=4, grid_h=4)
    bag = build_bag(small_roi, cfg)
    assert bag.valid.tolist() == [True] * 4 + [False] * 2
    assert bag.patches.shape == (6, 3, 16, 16)
    assert np.all(bag.patches[~bag.valid] == 0)
    assert np.all(bag.grid_x[~bag.valid] == cfg.pad_pos_x)
    assert np.all(bag.grid_y[~bag.valid] == cfg.pad_pos_y)
    assert np.all(bag.grade_ids[~bag.valid] == cfg.pad_grade)
    assert bag.grade_ids[:4].tolist() == [2, 1, 1, 0]
    assert np.all(bag.grid_x[bag.valid] < 4) and np.all(bag.grid_y[bag.valid] < 4)
    assert bag.label == 1


def test_build_bag_three_nuclei_n5():
    roi = RoiRecord(np.zeros((3, 40, 40)), [make_nucleus(5 * i + 3, 7, "grade1") for i in range(3)], "type1", "r")
    bag = build_bag(roi, IViTConfig(P=8, N=5, D=4, heads=1, layers=1, grid_w=2, grid_h=2))
    assert bag.valid.tolist() == [True, True, True, False, False]


def test_build_bag_truncates_to_n():
    rng = np.random.default_rng(3)
    nuclei = [make_nucleus(*rng.uniform(0, 100, 2), "grade2", float(rng.integers(1, 50))) for _ in range(60)]
    roi = RoiRecord(np.zeros((3, 100, 100)), nuclei, "type1", "r")
    bag = build_bag(roi, IViTConfig(P=8, N=50, D=4, heads=1, layers=1, grid_w=5, grid_h=5))
    assert bag.valid.all() and bag.n_valid == 50


def test_build_bag_rejects_roi_larger_than_grid(small_roi):
    cfg = IViTConfig(P=16, N=6, D=8, heads=2, layers=1, grid_w=3, grid_h=4)
    with pytest.raises(ContractError, match="position grid"):
        build_bag(small_roi, cfg)


def test_build_bag_all_endothelial():
    roi = RoiRecord(np.zeros((3, 40, 40)), [make_nucleus(5, 5, "endothelial")], "type1", "r")
    with pytest.raises(EmptyBagError):
        build_bag(roi, IViTConfig(P=8, N=5, D=4, heads=1, layers=1, grid_w=2, grid_h=2))


def test_nucleus_validation():
    with pytest.raises(ContractError):
        Nucleus(1, 1, "grade4", 5, 2, 1)
    with pytest.raises(ContractError):
        Nucleus(1, 1, "grade1", 0, 2, 1)
    with pytest.raises(ContractError):
        Nucleus(1, 1, "grade1", 5, 1, 2)
    with pytest.raises(ContractError):
        Nucleus(1, 1, "grade1", 3, 2, 1, mask=np.zeros((2, 2)))


def test_roi_rejects_centre_outside():
    with pytest.raises(ContractError):
        RoiRecord(np.zeros((3, 10, 10)), [make_nucleus(12, 2)], "type1", "r")


@settings(max_examples=40, deadline=None)
@given(st.sets(st.tuples(st.integers(0, 9), st.integers(0, 12)), min_size=1, max_size=60))
def test_rle_roundtrip(pixels):
    mask = np.array(sorted(pixels), dtype=np.int64)
    back = decode_rle(encode_rle(mask, 13), 13)
    np.testing.assert_array_equal(back, mask)


def test_rle_format_is_start_length_pairs():
    mask = np.array([[0, 1], [0, 2], [0, 3], [1, 0]])
    assert encode_rle(mask, 10) == "1 3 10 1"


def test_manifest_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    image = np.rint(rng.uniform(size=(3, 30, 40)) * 255) / 255
    mask = np.array([[10, 10], [10, 11], [11, 10]])
    area, major, minor = compute_morphology(mask)
    roi = RoiRecord(image, [Nucleus(10.3, 10.3, "grade2", area, major, minor, mask),
                            make_nucleus(30, 5, "endothelial")], "type2", "roi_a", "val")
    path = write_manifest([roi], tmp_path)
    entry = json.loads(path.read_text().splitlines()[0])
    assert set(entry) >= {"roi_id", "image", "label", "nuclei"}
    assert entry["nuclei"][0]["mask_rle"] == encode_rle(mask, 40)
    (back,) = list(iter_manifest(path))
    np.testing.assert_array_equal(back.image, image)
    assert back.label == "type2" and back.split == "val"
    np.testing.assert_array_equal(back.nuclei[0].mask, mask)
    assert back.nuclei[1].mask is None
    assert list(iter_manifest(path, split="train")) == []


def test_manifest_missing_key(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps({"roi_id": "x", "label": "type1", "nuclei": []}) + "\n")
    with pytest.raises(ContractError, match="image"):
        read_manifest(p)
