import math

import numpy as np
import pytest
from scipy.special import erf

from ivit.checks import end_to_end_check
from ivit.config import ConfigError, IViTConfig, scale_config
from ivit.instances import InstanceBag
from ivit.model import (
    BagBatch,
    assemble_sequence,
    assemble_sequence_h,
    checkpoint_bytes,
    embed_patches,
    encoder_layer,
    forward_classify,
    forward_classify_h,
    forward_logits,
    init_params,
    init_params_h,
    key_mask,
    load_checkpoint,
    probabilities,
    save_checkpoint,
    stack_bags,
)
from ivit.numerics import ContractError, Tensor, no_grad


def random_bag(cfg, rng, n_valid=None, label=0):
    n_valid = cfg.N if n_valid is None else n_valid
    valid = np.arange(cfg.N) < n_valid
    patches = rng.uniform(size=(cfg.N, cfg.channels, cfg.P, cfg.P)) * valid[:, None, None, None]
    return InstanceBag(
        patches,
        np.where(valid, rng.integers(0, cfg.grid_w, cfg.N), cfg.pad_pos_x),
        np.where(valid, rng.integers(0, cfg.grid_h, cfg.N), cfg.pad_pos_y),
        np.where(valid, rng.integers(0, cfg.n_grades, cfg.N), cfg.pad_grade),
        valid,
        label,
    )


def permute_bag(bag, perm):
    return InstanceBag(bag.patches[perm], bag.grid_x[perm], bag.grid_y[perm], bag.grade_ids[perm],
                       bag.valid[perm], bag.label)


# -- config --------------------------------------------------------------------------------

def test_config_defaults_and_validation():
    cfg = IViTConfig()
    assert (cfg.P, cfg.N, cfg.D, cfg.heads, cfg.layers) == (64, 500, 128, 12, 12)
    assert cfg.grid_w == 100 and cfg.dim_head == 10 and cfg.attn_dim == 120
    for bad in ({"D": 7}, {"P": 18}, {"P": 4}, {"heads": 200, "D": 128}, {"N": 0}):
        with pytest.raises(ConfigError):
            IViTConfig(**bad)
    assert IViTConfig(D=32, heads=4).dim_head == 8


def test_scale_config():
    cfg = scale_config(IViTConfig(D=32, heads=4), "T-6-6")
    assert (cfg.layers, cfg.heads, cfg.D) == (6, 6, 128)
    with pytest.raises(ConfigError):
        scale_config(cfg, "X-1-1")


def test_parameter_names_and_shapes():
    cfg = IViTConfig(P=16, N=4, D=8, heads=2, layers=2, grid_w=5, grid_h=6)
    p = init_params(cfg, 0)
    assert p["cnn.conv1.w"].shape == (8, 3, 5, 5)
    assert p["cnn.conv2.w"].shape == (16, 8, 5, 5)
    assert p["cnn.fc1.w"].shape == (16 * 4 * 4, 256)
    assert p["cnn.fc2.w"].shape == (256, 8)
    assert p["pos_x"].shape == (7, 4) and p["pos_y"].shape == (8, 4)
    assert p["grade"].shape == (5, 8) and p["cls_token"].shape == (1, 8)
    for l in range(2):
        for name in ("ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv",
                     "attn.bv", "attn.wo", "attn.bo", "ln2.gamma", "ln2.beta", "mlp.w1", "mlp.b1",
                     "mlp.w2", "mlp.b2"):
            assert f"layer{l}.{name}" in p
    assert p["layer0.mlp.w1"].shape == (8, 32)
    assert p["head.w"].shape == (8, 2) and p["head.b"].shape == (2,)
    assert np.all(p["layer1.ln2.gamma"].data == 1) and np.all(p["cnn.fc1.b"].data == 0)


# -- patch embedding -----------------------------------------------------------------------

def test_embed_paper_shape():
    cfg = IViTConfig()
    p = init_params(cfg, 0)
    patches = np.random.default_rng(0).uniform(size=(cfg.N, 3, 64, 64))
    with no_grad():
        out = embed_patches(patches, p)
    assert out.shape == (500, 128)


def test_embed_zero_patch_zero_bias(tiny_cfg):
    p = init_params(tiny_cfg, 1)
    out = embed_patches(np.zeros((3, 3, 16, 16)), p).data
    assert np.all(out == 0)


def test_embed_identical_patches(tiny_cfg, rng):
    p = init_params(tiny_cfg, 1)
    x = rng.uniform(size=(3, 16, 16))
    out = embed_patches(np.stack([x, rng.uniform(size=(3, 16, 16)), x]), p).data
    assert out[0].tobytes() == out[2].tobytes()


def test_embed_rejects_bad_patch(tiny_cfg):
    with pytest.raises(ContractError):
        embed_patches(np.zeros((2, 3, 18, 18)), init_params(tiny_cfg, 0))


# -- sequence assembly ---------------------------------------------------------------------

def test_assemble_paper_shape():
    cfg = IViTConfig()
    p = init_params(cfg, 0)
    bag = random_bag(cfg, np.random.default_rng(0), n_valid=300)
    with no_grad():
        S, mask = assemble_sequence(stack_bags([bag]), p, cfg)
    assert S.shape == (1, 501, 128)
    assert mask.shape == (1, 501) and mask[0, 0] and mask[0].sum() == 301


def test_assemble_embedding_layout(tiny_cfg, rng):
    p = init_params(tiny_cfg, 2)
    bag = random_bag(tiny_cfg, rng, n_valid=4)
    bag.patches[:] = 0.0
    S = assemble_sequence(stack_bags([bag]), p, tiny_cfg)[0].data[0]
    h = tiny_cfg.D // 2
    px, py, gr = p["pos_x"].data, p["pos_y"].data, p["grade"].data
    # class row uses the reserved slot of every table
    cls_pos = np.concatenate([px[tiny_cfg.cls_pos_x], py[tiny_cfg.cls_pos_y]])
    np.testing.assert_allclose(S[0], p["cls_token"].data[0] + cls_pos + gr[tiny_cfg.cls_grade], rtol=0, atol=1e-15)
    for i in range(tiny_cfg.N):
        row = S[i + 1]
        gx = bag.grid_x[i] if bag.valid[i] else tiny_cfg.pad_pos_x
        gy = bag.grid_y[i] if bag.valid[i] else tiny_cfg.pad_pos_y
        g = bag.grade_ids[i] if bag.valid[i] else tiny_cfg.pad_grade
        np.testing.assert_allclose(row[:h] - gr[g][:h], px[gx], rtol=0, atol=1e-15)
        np.testing.assert_allclose(row[h:] - gr[g][h:], py[gy], rtol=0, atol=1e-15)


def test_assemble_permutation_moves_rows(tiny_cfg, rng):
    p = init_params(tiny_cfg, 3)
    bag = random_bag(tiny_cfg, rng)
    perm = rng.permutation(tiny_cfg.N)
    a = assemble_sequence(stack_bags([bag]), p, tiny_cfg)[0].data[0]
    b = assemble_sequence(stack_bags([permute_bag(bag, perm)]), p, tiny_cfg)[0].data[0]
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_allclose(b[1:], a[1:][perm], atol=1e-15)


def test_assemble_rejects_grid_overflow(tiny_cfg, rng):
    bag = random_bag(tiny_cfg, rng)
    bag.grid_x[0] = tiny_cfg.grid_w
    with pytest.raises(ContractError, match="grid_x"):
        assemble_sequence(stack_bags([bag]), init_params(tiny_cfg, 0), tiny_cfg)


# -- encoder -------------------------------------------------------------------------------

def dense_encoder_oracle(S, valid, p, l, heads):
    """Loop-level pre-norm block for one sequence [T, D]."""
    T, D = S.shape
    pre = f"layer{l}."

    def ln(x, g, b):
        out = np.empty_like(x)
        for t in range(len(x)):
            m = sum(x[t]) / D
            v = sum((x[t] - m) ** 2) / D
            out[t] = (x[t] - m) / math.sqrt(v + 1e-5) * g + b
        return out

    def w(name):
        return p[pre + name].data

    h = ln(S, w("ln1.gamma"), w("ln1.beta"))
    q = h @ w("attn.wq") + w("attn.bq")
    k = h @ w("attn.wk") + w("attn.bk")
    v = h @ w("attn.wv") + w("attn.bv")
    dh = q.shape[1] // heads
    out = np.zeros((T, heads * dh))
    for hd in range(heads):
        cols = slice(hd * dh, (hd + 1) * dh)
        for i in range(T):
            scores = [float(q[i, cols] @ k[j, cols]) / math.sqrt(dh) if valid[j] else -math.inf for j in range(T)]
            top = max(scores)
            e = [math.exp(s - top) if s > -math.inf else 0.0 for s in scores]
            z = sum(e)
            for j in range(T):
                out[i, cols] += e[j] / z * v[j, cols]
    s_hat = S + out @ w("attn.wo") + w("attn.bo")
    h2 = ln(s_hat, w("ln2.gamma"), w("ln2.beta"))
    a = h2 @ w("mlp.w1") + w("mlp.b1")
    g = a * 0.5 * (1 + erf(a / math.sqrt(2)))
    return s_hat + g @ w("mlp.w2") + w("mlp.b2")


def test_encoder_matches_dense_oracle(rng):
    cfg = IViTConfig(P=8, N=3, D=8, heads=2, layers=1, grid_w=2, grid_h=2)
    p = init_params(cfg, 5)
    for name, t in p.items():
        if name.startswith("layer0.") and not name.endswith("gamma"):
            t.data[...] = rng.normal(scale=0.5, size=t.shape)
    S = rng.normal(size=(1, 4, 8))
    valid = np.array([True, True, True, False])
    out = encoder_layer(Tensor(S), valid[None], p, 0, cfg).data[0]
    np.testing.assert_allclose(out, dense_encoder_oracle(S[0], valid, p, 0, 2), rtol=0, atol=1e-10)


def test_encoder_zero_branches_is_identity(tiny_cfg, rng):
    p = init_params(tiny_cfg, 0)
    for name in ("attn.wo", "attn.bo", "mlp.w2", "mlp.b2"):
        p[f"layer0.{name}"].data[...] = 0.0
    S = rng.normal(size=(2, 7, 8))
    out = encoder_layer(Tensor(S), np.ones((2, 7), bool), p, 0, tiny_cfg).data
    np.testing.assert_array_equal(out, S)


def test_attention_rows_respect_mask(tiny_cfg, rng):
    p = init_params(tiny_cfg, 0)
    valid = np.zeros((1, tiny_cfg.N), bool)
    valid[0, 0] = True
    trace = {}
    encoder_layer(Tensor(rng.normal(size=(1, tiny_cfg.N + 1, 8))), key_mask(valid), p, 0, tiny_cfg, trace)
    attn = trace["attention"][0]
    assert np.all(attn[..., 2:] == 0.0)
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-12)


# -- classification ------------------------------------------------------------------------

def test_logits_length_and_probabilities(tiny_cfg, rng):
    p = init_params(tiny_cfg, 0)
    logits = forward_classify(random_bag(tiny_cfg, rng, 3), p, tiny_cfg)
    assert logits.shape == (2,)
    np.testing.assert_allclose(probabilities(logits).sum(), 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_permutation_invariance(tiny_cfg, seed):
    rng = np.random.default_rng(seed)
    p = init_params(tiny_cfg, seed)
    bag = random_bag(tiny_cfg, rng, n_valid=int(rng.integers(1, tiny_cfg.N + 1)))
    base = forward_classify(bag, p, tiny_cfg).data
    for _ in range(5):
        perm = rng.permutation(tiny_cfg.N)
        out = forward_classify(permute_bag(bag, perm), p, tiny_cfg).data
        assert np.abs(out - base).max() < 1e-9


def test_pad_content_has_no_effect(tiny_cfg, rng):
    p = init_params(tiny_cfg, 0)
    bag = random_bag(tiny_cfg, rng, n_valid=3)
    base = forward_classify(bag, p, tiny_cfg).data
    bag.patches[3:] = rng.uniform(size=bag.patches[3:].shape)
    bag.grid_x[3:] = 0
    bag.grade_ids[3:] = 1
    assert np.array_equal(forward_classify(bag, p, tiny_cfg).data, base)


def test_padding_length_does_not_matter(rng):
    c8 = IViTConfig(P=16, N=8, D=8, heads=2, layers=2, grid_w=4, grid_h=4)
    c16 = c8.replace(N=16)
    p = init_params(c8, 0)
    small = random_bag(c8, rng, n_valid=3)
    big = random_bag(c16, rng, n_valid=3)
    for f in ("patches", "grid_x", "grid_y", "grade_ids"):
        getattr(big, f)[:3] = getattr(small, f)[:3]
    a = forward_classify(small, p, c8).data
    b = forward_classify(big, p, c16).data
    assert np.abs(a - b).max() < 1e-9


def test_batch_matches_single(tiny_cfg, rng):
    p = init_params(tiny_cfg, 0)
    bags = [random_bag(tiny_cfg, rng, n) for n in (2, 6, 4)]
    batched = forward_logits(stack_bags(bags), p, tiny_cfg).data
    for i, b in enumerate(bags):
        np.testing.assert_allclose(batched[i], forward_classify(b, p, tiny_cfg).data, atol=1e-12)


# -- i-ViT-H -------------------------------------------------------------------------------

@pytest.fixture
def h_cfg():
    return IViTConfig(P=16, N=6, D=32, heads=2, layers=1, grid_w=4, grid_h=4)


def test_h_permutation_invariance(h_cfg, rng):
    p = init_params_h(h_cfg, 0)
    feats = rng.normal(size=(6, 10))
    grades = rng.integers(0, 3, size=6)
    base = forward_classify_h(feats, grades, p, h_cfg).data
    assert base.shape == (2,)
    perm = rng.permutation(6)
    assert np.abs(forward_classify_h(feats[perm], grades[perm], p, h_cfg).data - base).max() < 1e-9


def test_h_zero_features_reduce_to_grade_embeddings(h_cfg, rng):
    p = init_params_h(h_cfg, 0)
    grades = rng.integers(0, 3, size=6)
    batch = BagBatch(np.zeros((1, 6, 10)), None, None, grades[None], np.ones((1, 6), bool), np.zeros(1, int))
    S, _ = assemble_sequence_h(batch, p, h_cfg)
    np.testing.assert_array_equal(S.data[0, 1:], p["grade"].data[grades])


def test_h_has_no_position_tables(h_cfg):
    p = init_params_h(h_cfg, 0)
    assert "pos_x" not in p and "proj.w" in p and p["proj.w"].shape == (10, 32)


# -- gradients and checkpoints -------------------------------------------------------------

def test_end_to_end_gradients():
    rows = end_to_end_check(seed=0)
    assert len(rows) == len(init_params(IViTConfig(P=16, N=4, D=8, heads=2, layers=1, grid_w=5, grid_h=5)))
    assert all(r.passed for r in rows), [r for r in rows if not r.passed]


def test_checkpoint_roundtrip(tmp_path, tiny_cfg):
    p = init_params(tiny_cfg, 0)
    p.buffers["extra"] = np.arange(3.0)
    path = tmp_path / "m.zip"
    save_checkpoint(path, "ivit", {"model": tiny_cfg.to_dict()}, p)
    meta, back = load_checkpoint(path)
    assert meta["kind"] == "ivit" and IViTConfig.from_dict(meta["model"]) == tiny_cfg
    assert set(back) == set(p)
    for name, t in p.items():
        assert back[name].data.tobytes() == t.data.tobytes()
    np.testing.assert_array_equal(back.buffers["extra"], [0, 1, 2])


def test_checkpoint_bytes_deterministic(tiny_cfg):
    a = checkpoint_bytes("ivit", {"x": 1}, init_params(tiny_cfg, 4))
    b = checkpoint_bytes("ivit", {"x": 1}, init_params(tiny_cfg, 4))
    assert a == b
