import numpy as np
import pytest

from ivit.config import ConfigError
from ivit.instances import compute_morphology, iter_manifest, read_manifest
from ivit.numerics import ContractError
from ivit.synthetic import SynthParams, generate_dataset, generate_roi, split_counts


def roi_bytes(roi):
    parts = [roi.image.tobytes(), roi.label.encode(), roi.roi_id.encode()]
    for n in roi.nuclei:
        parts.append(repr((n.cx, n.cy, n.kind, n.area, n.major_axis, n.minor_axis)).encode())
        parts.append(n.mask.tobytes())
    return b"".join(parts)


def test_generate_is_deterministic():
    p = SynthParams(seed=7)
    assert roi_bytes(generate_roi("type1", p, 0)) == roi_bytes(generate_roi("type1", p, 0))
    assert roi_bytes(generate_roi("type1", p, 0)) != roi_bytes(generate_roi("type1", p, 1))


@pytest.mark.parametrize("index", range(4))
def test_type1_has_no_grade3(index):
    roi = generate_roi("type1", SynthParams(seed=7), index)
    assert all(n.kind != "grade3" for n in roi.nuclei)
    assert roi.label == "type1"


def test_type2_includes_grade3():
    kinds = [n.kind for i in range(3) for n in generate_roi("type2", SynthParams(seed=7), i).nuclei]
    frac = kinds.count("grade3") / sum(k != "endothelial" for k in kinds)
    assert 0.2 < frac < 0.5


@pytest.mark.parametrize("label", ["type1", "type2"])
def test_masks_inside_image_and_morphology_reproduces(label):
    roi = generate_roi(label, SynthParams(seed=3), 2)
    size = roi.image.shape[1]
    assert roi.image.shape == (3, 400, 400)
    assert roi.image.min() >= 0 and roi.image.max() <= 1
    np.testing.assert_array_equal(np.rint(roi.image * 255) / 255, roi.image)
    for n in roi.nuclei:
        assert n.mask.min() >= 0 and n.mask.max() < size
        area, major, minor = compute_morphology(n.mask)
        assert abs(area - n.area) <= 1e-9
        assert abs(major - n.major_axis) <= 1e-9 and abs(minor - n.minor_axis) <= 1e-9
        assert n.major_axis >= n.minor_axis > 0


@pytest.mark.parametrize("index", range(3))
def test_spatial_only_pairs_share_grades(index):
    p = SynthParams(seed=5, ablation="spatial_only")
    a, b = generate_roi("type1", p, index), generate_roi("type2", p, index)
    grades = lambda roi: sorted(n.kind for n in roi.nuclei if n.kind != "endothelial")  # noqa: E731
    assert grades(a) == grades(b)
    assert all(n.kind != "grade3" for n in b.nuclei)


@pytest.mark.parametrize("index", range(3))
def test_grade_only_pairs_share_layout(index):
    p = SynthParams(seed=5, ablation="grade_only")
    a, b = generate_roi("type1", p, index), generate_roi("type2", p, index)
    ta = [n for n in a.nuclei if n.is_tumor]
    tb = [n for n in b.nuclei if n.is_tumor]
    assert len(ta) == len(tb)
    # same slots; only the nucleus size (grade) moves the mask centroid slightly
    ca = np.array([(n.cx, n.cy) for n in ta])
    cb = np.array([(n.cx, n.cy) for n in tb])
    assert np.abs(ca - cb).max() < 1.5
    assert any(n.kind == "grade3" for n in tb)


def test_ablation_modes_share_cytoplasm_hue():
    p = SynthParams(seed=2, ablation="grade_only", noise_std=0.0)
    a, b = generate_roi("type1", p, 0), generate_roi("type2", p, 0)
    cols = lambda img: {tuple(c) for c in np.round(img.reshape(3, -1).T, 3)}  # noqa: E731
    assert cols(a.image) & cols(b.image)


def test_param_validation():
    with pytest.raises(ConfigError):
        SynthParams(roi_size=410)
    with pytest.raises(ConfigError):
        SynthParams(type2_grade3_fraction=1.5)
    with pytest.raises(ConfigError):
        SynthParams(ablation="none")
    with pytest.raises(ConfigError):
        SynthParams(type1_grade_mix=(0.5, 0.3, 0.2))
    with pytest.raises(ContractError):
        SynthParams(roi_size=60)
    with pytest.raises(ConfigError):
        SynthParams.from_dict({"colour": 1})


def test_split_counts():
    assert split_counts(10) == (6, 2, 2)
    assert split_counts(160, (0.625, 0.1875, 0.1875)) == (100, 30, 30)


def test_dataset_split_and_bytes(tmp_path):
    p = SynthParams(seed=1)
    m1 = generate_dataset(10, p, tmp_path / "a")
    m2 = generate_dataset(10, p, tmp_path / "b", threads=3)
    assert m1.read_bytes() == m2.read_bytes()
    for e in read_manifest(m1):
        assert (tmp_path / "a" / e["image"]).read_bytes() == (tmp_path / "b" / e["image"]).read_bytes()
    entries = read_manifest(m1)
    assert len(entries) == 20
    splits = [e["split"] for e in entries]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (12, 4, 4)
    for label in ("type1", "type2"):
        assert [e["split"] for e in entries if e["label"] == label] == ["train"] * 6 + ["val"] * 2 + ["test"] * 2
    roi = next(iter_manifest(m1))
    ref = generate_roi(roi.label, p, 0)
    np.testing.assert_array_equal(roi.image, ref.image)
    assert [n.area for n in roi.nuclei] == [n.area for n in ref.nuclei]


def test_dataset_rejects_zero(tmp_path):
    with pytest.raises(ContractError):
        generate_dataset(0, SynthParams(), tmp_path)


def test_dataset_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ContractError, match="cannot create"):
        generate_dataset(1, SynthParams(), blocker / "out")
