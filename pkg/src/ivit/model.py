"""The instance transformer and its hand-crafted-feature variant.

Both models share one encoder: a class token followed by N instance tokens,
pre-norm multi-head self-attention and GELU MLP blocks with residuals, and a
linear head on the final class-token state.  Padded instance slots are
excluded as attention keys and carry reserved embedding rows only.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import IViTConfig
from .instances import InstanceBag
from .numerics import ContractError, Tensor, ops
from .numerics.serialize import decode, encode

CNN_CHANNELS = (8, 16)
CNN_KERNEL = 5
CNN_HIDDEN = 256
EMBED_STD = 0.02


class ParameterStore:
    """Named learnable tensors plus fixed buffers (e.g. feature scaling)."""

    def __init__(self, tensors: dict[str, Tensor] | None = None, buffers: dict[str, np.ndarray] | None = None):
        self.tensors: dict[str, Tensor] = dict(tensors or {})
        self.buffers: dict[str, np.ndarray] = dict(buffers or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def add(self, name: str, data: np.ndarray) -> None:
        self.tensors[name] = Tensor(data, requires_grad=True)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self.tensors or self.tensors[k].shape != v.shape:
                raise ContractError(f"parameter {k!r} missing or shaped differently")
            self.tensors[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> ParameterStore:
        return ParameterStore(
            {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())


# -- initialisation -------------------------------------------------------------------

def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _init_encoder(store: ParameterStore, cfg: IViTConfig, rng: np.random.Generator) -> None:
    D, A, H = cfg.D, cfg.attn_dim, cfg.mlp_ratio * cfg.D
    store.add("cls_token", rng.normal(0.0, EMBED_STD, size=(1, D)))
    store.add("grade", rng.normal(0.0, EMBED_STD, size=(cfg.n_grades + 2, D)))
    for l in range(cfg.layers):
        p = f"layer{l}."
        for ln in ("ln1", "ln2"):
            store.add(p + ln + ".gamma", np.ones(D))
            store.add(p + ln + ".beta", np.zeros(D))
        for name in ("wq", "wk", "wv"):
            store.add(p + "attn." + name, _he(rng, (D, A), D))
            store.add(p + "attn.b" + name[1], np.zeros(A))
        store.add(p + "attn.wo", _he(rng, (A, D), A))
        store.add(p + "attn.bo", np.zeros(D))
        store.add(p + "mlp.w1", _he(rng, (D, H), D))
        store.add(p + "mlp.b1", np.zeros(H))
        store.add(p + "mlp.w2", _he(rng, (H, D), H))
        store.add(p + "mlp.b2", np.zeros(D))
    store.add("head.w", _he(rng, (D, cfg.n_classes), D))
    store.add("head.b", np.zeros(cfg.n_classes))


def init_params(cfg: IViTConfig, seed: int | np.random.Generator = 0) -> ParameterStore:
    """Fresh i-ViT parameters: tiny CNN, embedding tables, encoder and head."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    store = ParameterStore()
    c1, c2 = CNN_CHANNELS
    k = CNN_KERNEL
    flat = c2 * (cfg.P // 4) ** 2
    store.add("cnn.conv1.w", _he(rng, (c1, cfg.channels, k, k), cfg.channels * k * k))
    store.add("cnn.conv1.b", np.zeros(c1))
    store.add("cnn.conv2.w", _he(rng, (c2, c1, k, k), c1 * k * k))
    store.add("cnn.conv2.b", np.zeros(c2))
    store.add("cnn.fc1.w", _he(rng, (flat, CNN_HIDDEN), flat))
    store.add("cnn.fc1.b", np.zeros(CNN_HIDDEN))
    store.add("cnn.fc2.w", _he(rng, (CNN_HIDDEN, cfg.D), CNN_HIDDEN))
    store.add("cnn.fc2.b", np.zeros(cfg.D))
    store.add("pos_x", rng.normal(0.0, EMBED_STD, size=(cfg.grid_w + 2, cfg.D // 2)))
    store.add("pos_y", rng.normal(0.0, EMBED_STD, size=(cfg.grid_h + 2, cfg.D // 2)))
    _init_encoder(store, cfg, rng)
    return store


def init_params_h(cfg: IViTConfig, seed: int | np.random.Generator = 0) -> ParameterStore:
    """Fresh i-ViT-H parameters: a per-nucleus linear projection replaces the CNN."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    store = ParameterStore()
    store.add("proj.w", _he(rng, (cfg.n_features, cfg.D), cfg.n_features))
    store.add("proj.b", np.zeros(cfg.D))
    _init_encoder(store, cfg, rng)
    store.buffers["feat_mean"] = np.zeros(cfg.n_features)
    store.buffers["feat_std"] = np.ones(cfg.n_features)
    return store


# -- batches ------------------------------------------------------------------------

@dataclass
class BagBatch:
    """Stacked bags; ``inputs`` are patches [B,N,C,P,P] or features [B,N,F]."""

    inputs: np.ndarray
    grid_x: np.ndarray
    grid_y: np.ndarray
    grade_ids: np.ndarray
    valid: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def stack_bags(bags: Sequence[InstanceBag]) -> BagBatch:
    return BagBatch(
        np.stack([b.patches for b in bags]),
        np.stack([b.grid_x for b in bags]),
        np.stack([b.grid_y for b in bags]),
        np.stack([b.grade_ids for b in bags]),
        np.stack([b.valid for b in bags]),
        np.array([b.label for b in bags], dtype=np.int64),
    )


# -- forward pieces -----------------------------------------------------------------

def embed_patches(patches, params: ParameterStore) -> Tensor:
    """Tiny CNN applied independently to every patch: [..., C, P, P] -> [..., D]."""
    arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches, dtype=np.float64)
    lead, (c, p, p2) = arr.shape[:-3], arr.shape[-3:]
    if p != p2 or p % 4:
        raise ContractError(f"patches must be square with P divisible by 4, got {p}x{p2}")
    x = patches if isinstance(patches, Tensor) else Tensor(arr)
    x = ops.reshape(x, (-1, c, p, p))
    pad = CNN_KERNEL // 2
    h = ops.relu(ops.conv2d(x, params["cnn.conv1.w"], params["cnn.conv1.b"], 2, pad))
    h = ops.relu(ops.conv2d(h, params["cnn.conv2.w"], params["cnn.conv2.b"], 2, pad))
    h = ops.reshape(h, (h.shape[0], -1))
    h = ops.relu(ops.linear(h, params["cnn.fc1.w"], params["cnn.fc1.b"]))
    h = ops.linear(h, params["cnn.fc2.w"], params["cnn.fc2.b"])
    return ops.reshape(h, lead + (h.shape[-1],))


def _token_ids(ids: np.ndarray, valid: np.ndarray, cls_id: int, pad_id: int, vocab: int, what: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    real = ids[valid]
    if real.size and (real.min() < 0 or real.max() >= vocab):
        bad = real[(real < 0) | (real >= vocab)][0]
        raise ContractError(f"{what} index {int(bad)} outside vocabulary of {vocab}")
    out = np.where(valid, ids, pad_id)
    cls = np.full(ids.shape[:-1] + (1,), cls_id, dtype=np.int64)
    return np.concatenate([cls, out], axis=-1)


def _prepend_class(tokens: Tensor, valid: np.ndarray, params: ParameterStore) -> Tensor:
    """[B, N, D] instance tokens -> [B, N+1, D] with pads zeroed and class token first."""
    b, _, d = tokens.shape
    tokens = ops.mul(tokens, Tensor(valid[..., None].astype(np.float64)))
    cls = ops.add(Tensor(np.zeros((b, 1, d))), params["cls_token"])
    return ops.concat([cls, tokens], axis=1)


def key_mask(valid: np.ndarray) -> np.ndarray:
    """[B, N] instance validity -> [B, N+1] key mask with the class token live."""
    valid = np.asarray(valid, dtype=bool)
    return np.concatenate([np.ones(valid.shape[:-1] + (1,), dtype=bool), valid], axis=-1)


def assemble_sequence(batch: BagBatch, params: ParameterStore, cfg: IViTConfig) -> tuple[Tensor, np.ndarray]:
    """S0 = [cls; CNN(x_i)] + [pos_x | pos_y] + grade, with its key mask."""
    valid = np.asarray(batch.valid, dtype=bool)
    gx = _token_ids(batch.grid_x, valid, cfg.cls_pos_x, cfg.pad_pos_x, cfg.grid_w, "grid_x")
    gy = _token_ids(batch.grid_y, valid, cfg.cls_pos_y, cfg.pad_pos_y, cfg.grid_h, "grid_y")
    gr = _token_ids(batch.grade_ids, valid, cfg.cls_grade, cfg.pad_grade, cfg.n_grades, "grade")
    seq = _prepend_class(embed_patches(batch.inputs, params), valid, params)
    pos = ops.concat(
        [ops.embedding_lookup(params["pos_x"], gx), ops.embedding_lookup(params["pos_y"], gy)],
        axis=-1,
    )
    s0 = ops.add(ops.add(seq, pos), ops.embedding_lookup(params["grade"], gr))
    return s0, key_mask(valid)


def assemble_sequence_h(batch: BagBatch, params: ParameterStore, cfg: IViTConfig) -> tuple[Tensor, np.ndarray]:
    """Feature-token variant: standardised features projected to D, plus grade; no positions."""
    valid = np.asarray(batch.valid, dtype=bool)
    gr = _token_ids(batch.grade_ids, valid, cfg.cls_grade, cfg.pad_grade, cfg.n_grades, "grade")
    feats = (np.asarray(batch.inputs, dtype=np.float64) - params.buffers["feat_mean"]) / params.buffers["feat_std"]
    feats = np.where(valid[..., None], feats, 0.0)
    tokens = ops.linear(Tensor(feats), params["proj.w"], params["proj.b"])
    seq = _prepend_class(tokens, valid, params)
    return ops.add(seq, ops.embedding_lookup(params["grade"], gr)), key_mask(valid)


def encoder_layer(
    S: Tensor, mask: np.ndarray, params: ParameterStore, layer: int, cfg: IViTConfig, trace: dict | None = None
) -> Tensor:
    """One pre-norm block: S^ = MSA(LN(S)) + S ; S' = MLP(LN(S^)) + S^."""
    p = f"layer{layer}."
    b, t, _ = S.shape
    heads, dh = cfg.heads, cfg.dim_head

    h = ops.layer_norm(S, params[p + "ln1.gamma"], params[p + "ln1.beta"], 1e-5)

    def split(name):
        z = ops.linear(h, params[p + "attn.w" + name], params[p + "attn.b" + name])
        return ops.transpose(ops.reshape(z, (b, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ops.softmax_rows(scores, mask[:, None, None, :])
    if trace is not None:
        trace.setdefault("attention", []).append(attn.data)
    o = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (b, t, heads * dh))
    s_hat = ops.add(S, ops.linear(o, params[p + "attn.wo"], params[p + "attn.bo"]))

    h2 = ops.layer_norm(s_hat, params[p + "ln2.gamma"], params[p + "ln2.beta"], 1e-5)
    m = ops.gelu(ops.linear(h2, params[p + "mlp.w1"], params[p + "mlp.b1"]))
    m = ops.linear(m, params[p + "mlp.w2"], params[p + "mlp.b2"])
    return ops.add(s_hat, m)


def encode_and_classify(
    S: Tensor, mask: np.ndarray, params: ParameterStore, cfg: IViTConfig, trace: dict | None = None
) -> Tensor:
    if trace is not None:
        trace.setdefault("shapes", []).append(("S0", S.shape))
    for l in range(cfg.layers):
        S = encoder_layer(S, mask, params, l, cfg, trace)
        if trace is not None:
            trace["shapes"].append((f"S{l + 1}", S.shape))
    cls = ops.getitem(S, (slice(None), 0))
    return ops.linear(cls, params["head.w"], params["head.b"])


def forward_logits(batch: BagBatch, params: ParameterStore, cfg: IViTConfig, trace: dict | None = None) -> Tensor:
    """[B, n_classes] logits for a batch of patch bags."""
    S, mask = assemble_sequence(batch, params, cfg)
    return encode_and_classify(S, mask, params, cfg, trace)


def forward_logits_h(batch: BagBatch, params: ParameterStore, cfg: IViTConfig, trace: dict | None = None) -> Tensor:
    S, mask = assemble_sequence_h(batch, params, cfg)
    return encode_and_classify(S, mask, params, cfg, trace)


def forward_classify(bag: InstanceBag, params: ParameterStore, cfg: IViTConfig) -> Tensor:
    logits = forward_logits(stack_bags([bag]), params, cfg)
    return ops.reshape(logits, (cfg.n_classes,))


def forward_classify_h(features, grades, params: ParameterStore, cfg: IViTConfig, valid=None) -> Tensor:
    """Logits for one nucleus-feature sequence [N, F] with grade ids [N]."""
    features = np.asarray(features, dtype=np.float64)
    grades = np.asarray(grades, dtype=np.int64)
    valid = np.ones(len(grades), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    batch = BagBatch(features[None], None, None, grades[None], valid[None], np.zeros(1, np.int64))
    return ops.reshape(forward_logits_h(batch, params, cfg), (cfg.n_classes,))


def probabilities(logits: Tensor) -> np.ndarray:
    return ops.softmax_rows(logits).data


# -- checkpoints ----------------------------------------------------------------------

def save_checkpoint(path: str | Path, kind: str, meta: dict[str, Any], params: ParameterStore | None = None) -> None:
    """Zip archive: ``config.json`` plus one IVT1 entry per parameter and buffer."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_fixed_info("config.json"), json.dumps({"kind": kind, **meta}, sort_keys=True, indent=1))
        if params is not None:
            for name in sorted(params.tensors):
                zf.writestr(_fixed_info(f"params/{name}.ivt"), encode(params[name].data))
            for name in sorted(params.buffers):
                zf.writestr(_fixed_info(f"buffers/{name}.ivt"), encode(params.buffers[name]))


def _fixed_info(name: str) -> zipfile.ZipInfo:
    # Fixed timestamps keep archives byte-identical across runs.
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    return info


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], ParameterStore | None]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("config.json"))
        tensors, buffers = {}, {}
        for name in zf.namelist():
            if name.startswith("params/"):
                tensors[name[7:-4]] = Tensor(decode(zf.read(name)), requires_grad=True)
            elif name.startswith("buffers/"):
                buffers[name[8:-4]] = decode(zf.read(name))
    params = ParameterStore(tensors, buffers) if tensors else None
    return meta, params


def checkpoint_bytes(kind: str, meta: dict[str, Any], params: ParameterStore | None) -> bytes:
    buf = io.BytesIO()
    save_checkpoint(buf, kind, meta, params)
    return buf.getvalue()
