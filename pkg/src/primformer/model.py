"""The hierarchical primitive-transformer network.

Pipeline: a stack of 4D point-convolution layers over the clip, per-primitive
self-attention blocks on point features, max-pooled primitive tokens, a
token-level transformer over clip tokens plus an offline memory pool, and a
task head (per-point segmentation of the center frame, or clip
classification).

All parameters live in a flat name -> array dict so the optimizer and the
checkpoint container can treat them uniformly. The forward pass is built
entirely from the differentiable core ops, so gradients come from the tape.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import AllMasked, ConfigMismatch, InvalidConfig
from .geometry import NeighborIndex, PointSequence
from .primitives import SequenceAssignments
from .tensor import (
    GroupSpec,
    Tensor,
    add,
    concat,
    constant,
    gather_rows,
    gelu,
    group_max_pool,
    layer_norm,
    mask_rows,
    masked_row_softmax,
    matmul,
    row_softmax,
    scale,
    slice_axis,
    transpose,
)


@dataclass
class ModelConfig:
    """Dimensions and radii of the network; defaults give a tiny desk model."""

    feature_dim: int = 8      # point/token embedding width
    conv_dim: int = 8         # intermediate conv output width
    key_dim: int = 8          # attention key width
    value_dim: int = 8        # attention value width (must equal feature_dim)
    spatial_radius: float = 0.5
    temporal_radius: int = 1
    num_conv_layers: int = 2
    num_intra_blocks: int = 1
    num_primitive_blocks: int = 1
    ffn_dim: int = 16
    head_dim: int = 16
    m_target: int = 4
    clip_len: int = 3
    memory_len: int = 0
    num_classes: int = 4
    seed: int = 0
    conv_stride: int = 1      # >1 enables strided anchors + nearest upsample
    input_dim: int = 1        # constant per-point input features

    def __post_init__(self):
        dims = (
            self.feature_dim, self.conv_dim, self.key_dim, self.value_dim,
            self.ffn_dim, self.head_dim, self.m_target, self.num_classes,
            self.input_dim,
        )
        if any(d < 1 for d in dims):
            raise InvalidConfig("all dimensions must be >= 1")
        if self.spatial_radius <= 0:
            raise InvalidConfig("spatial_radius must be positive")
        if self.temporal_radius < 0 or self.clip_len < 1 or self.memory_len < 0:
            raise InvalidConfig("bad temporal extents")
        if self.temporal_radius >= self.clip_len:
            raise InvalidConfig("temporal_radius must be < clip_len")
        if self.value_dim != self.feature_dim:
            raise InvalidConfig("value_dim must equal feature_dim (residual blocks)")
        if self.conv_stride < 1:
            raise InvalidConfig("conv_stride must be >= 1")
        if min(self.num_conv_layers, self.num_intra_blocks) < 1:
            raise InvalidConfig("need at least one conv layer and one intra block")
        if self.num_primitive_blocks < 0:
            raise InvalidConfig("num_primitive_blocks must be >= 0")

    def to_kv(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_kv(cls, kv: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in kv:
                cast = float if f.type in (float, "float") else int
                kwargs[f.name] = cast(kv[f.name])
        return cls(**kwargs)

    def single_frame(self) -> "ModelConfig":
        """The memory-pool extractor variant: one frame, no memory, r_t=0."""
        kv = self.to_kv()
        kv.update(clip_len=1, memory_len=0, temporal_radius=0)
        return ModelConfig(**kv)


def _conv_dims(cfg: ModelConfig) -> list[tuple[int, int]]:
    n = cfg.num_conv_layers
    ins = [cfg.input_dim] + [cfg.conv_dim] * (n - 1)
    outs = [cfg.conv_dim] * (n - 1) + [cfg.feature_dim]
    return list(zip(ins, outs))


@dataclass
class ModelWeights:
    """All learnable parameters as named flat f64 arrays."""

    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def as_tensors(self, tape=None) -> dict[str, Tensor]:
        if tape is None:
            return {k: constant(v) for k, v in self.arrays.items()}
        return {k: tape.leaf(v, requires_grad=True) for k, v in self.arrays.items()}


def init_weights(cfg: ModelConfig) -> ModelWeights:
    """Seeded init: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); LN at identity."""
    rng = np.random.default_rng(cfg.seed)
    arrays: dict[str, np.ndarray] = {}

    def linear(name, fan_in, fan_out, bias=True):
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name + ".w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if bias:
            arrays[name + ".b"] = rng.uniform(-bound, bound, size=fan_out)

    def norm(name, dim):
        arrays[name + ".gain"] = np.ones(dim)
        arrays[name + ".bias"] = np.zeros(dim)

    def attention_block(prefix, dim):
        norm(f"{prefix}.ln1", dim)
        linear(f"{prefix}.wq", dim, cfg.key_dim, bias=False)
        linear(f"{prefix}.wk", dim, cfg.key_dim, bias=False)
        linear(f"{prefix}.wv", dim, cfg.value_dim, bias=False)
        norm(f"{prefix}.ln2", dim)
        linear(f"{prefix}.ffn1", dim, cfg.ffn_dim)
        linear(f"{prefix}.ffn2", cfg.ffn_dim, dim)

    for i, (fan_in, fan_out) in enumerate(_conv_dims(cfg)):
        bound = 1.0 / np.sqrt(fan_in)
        arrays[f"conv{i}.w_d"] = rng.uniform(-bound, bound, size=(4, fan_out))
        arrays[f"conv{i}.w_f"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    for i in range(cfg.num_intra_blocks):
        attention_block(f"intra{i}", cfg.feature_dim)
    for i in range(cfg.num_primitive_blocks):
        attention_block(f"prim{i}", cfg.feature_dim)
    linear("seg1", 3 * cfg.feature_dim, cfg.head_dim)
    linear("seg2", cfg.head_dim, cfg.head_dim)
    linear("seg3", cfg.head_dim, cfg.num_classes)
    linear("cls1", cfg.feature_dim, cfg.head_dim)
    linear("cls2", cfg.head_dim, cfg.num_classes)
    return ModelWeights(config=cfg, arrays=arrays)


# --- clip preparation ---------------------------------------------------------


@dataclass
class ConvPlan:
    """Constant neighborhood structure of one clip, reusable across layers
    and training epochs."""

    frame_offsets: np.ndarray          # start row of each frame
    n_total: int
    anchor_rows: np.ndarray            # global point row of each anchor
    deltas: np.ndarray                 # (P, 4) spatial-temporal offsets
    neighbor_rows: np.ndarray          # (P,) global point row per pair
    pair_groups: GroupSpec             # pair -> (anchor, dt) group
    dt_maps: list[np.ndarray]          # per dt offset: anchor -> group row (or G)
    upsample: np.ndarray | None        # point -> anchor index (stride > 1)


def prepare_clip(seq: PointSequence, cfg: ModelConfig) -> ConvPlan:
    """Enumerate every (anchor, dt, neighbor-in-ball) pair of the clip."""
    lengths = [len(fr) for fr in seq.frames]
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    indexes = [NeighborIndex(fr.positions) for fr in seq.frames]
    L = len(seq)
    rt = cfg.temporal_radius

    anchor_rows: list[int] = []
    anchor_frames: list[int] = []
    for t in range(L):
        for i in range(0, lengths[t], cfg.conv_stride):
            anchor_rows.append(int(offsets[t] + i))
            anchor_frames.append(t)

    deltas, neighbor_rows, pair_gids = [], [], []
    n_groups = 0
    dt_maps = [np.full(len(anchor_rows), -1, dtype=np.int64) for _ in range(2 * rt + 1)]
    for a, (row, t) in enumerate(zip(anchor_rows, anchor_frames)):
        pos = seq.frames[t].positions[row - offsets[t]]
        for dt in range(-rt, rt + 1):
            ft = t + dt
            if not 0 <= ft < L:
                continue
            ids = indexes[ft].radius_query(pos, cfg.spatial_radius)
            if not ids:
                continue  # empty ball in another frame contributes nothing
            gid = n_groups
            n_groups += 1
            dt_maps[dt + rt][a] = gid
            for q in ids:
                qpos = seq.frames[ft].positions[q]
                deltas.append((*(qpos - pos), float(dt)))
                neighbor_rows.append(int(offsets[ft] + q))
                pair_gids.append(gid)

    # Anchors with no group at a dt point at the appended zero row (index G).
    for m in dt_maps:
        m[m < 0] = n_groups

    upsample = None
    if cfg.conv_stride > 1:
        upsample = np.empty(int(offsets[-1]), dtype=np.int64)
        a0 = 0
        for t in range(L):
            frame_anchor_rows = [r - offsets[t] for r, ftag in
                                 zip(anchor_rows, anchor_frames) if ftag == t]
            aidx = NeighborIndex(seq.frames[t].positions[frame_anchor_rows])
            for i in range(lengths[t]):
                nearest = aidx.k_nearest(seq.frames[t].positions[i], 1)[0]
                upsample[offsets[t] + i] = a0 + nearest
            a0 += len(frame_anchor_rows)

    return ConvPlan(
        frame_offsets=offsets,
        n_total=int(offsets[-1]),
        anchor_rows=np.asarray(anchor_rows, dtype=np.int64),
        deltas=np.asarray(deltas, dtype=np.float64).reshape(-1, 4),
        neighbor_rows=np.asarray(neighbor_rows, dtype=np.int64),
        pair_groups=GroupSpec(np.asarray(pair_gids, dtype=np.int64), max(n_groups, 1)),
        dt_maps=dt_maps,
        upsample=upsample,
    )


def point4d_conv(plan: ConvPlan, feats: Tensor, w_d: Tensor, w_f: Tensor) -> Tensor:
    """One conv layer: offset embedding plus projected neighbor feature,
    max over each ball, summed over the temporal window."""
    proj = matmul(feats, w_f)
    offs = matmul(constant(plan.deltas), w_d)
    vals = add(gather_rows(proj, plan.neighbor_rows), offs)
    pooled = group_max_pool(vals, plan.pair_groups)
    padded = concat([pooled, constant(np.zeros((1, pooled.shape[1])))], axis=0)
    out = None
    for dt_map in plan.dt_maps:
        term = gather_rows(padded, dt_map)
        out = term if out is None else add(out, term)
    if plan.upsample is not None:
        out = gather_rows(out, plan.upsample)
    return out


# --- grouping helpers ---------------------------------------------------------


def intra_group_indices(
    assignments: SequenceAssignments, frame_offsets: np.ndarray
) -> list[np.ndarray]:
    """Point-row index sets per (frame, primitive) group, clutter included.

    The concatenation of the returned arrays is a permutation of all rows.
    """
    groups = []
    for t, a in enumerate(assignments.per_frame):
        for pid in range(0, a.m_actual + 1):
            members = a.members(pid)
            if len(members):
                groups.append(members + frame_offsets[t])
    return groups


def _inverse_permutation(order: np.ndarray) -> np.ndarray:
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    return inv


def grouped_attention(
    x: Tensor, groups: list[np.ndarray], wq: Tensor, wk: Tensor, wv: Tensor,
    key_dim: int,
) -> Tensor:
    """Independent softmax attention inside each group of rows."""
    inv_sqrt = 1.0 / np.sqrt(key_dim)
    outs = []
    for idx in groups:
        xg = gather_rows(x, idx)
        q = matmul(xg, wq)
        k = matmul(xg, wk)
        v = matmul(xg, wv)
        att = row_softmax(scale(matmul(q, transpose(k)), inv_sqrt))
        outs.append(matmul(att, v))
    order = np.concatenate(groups)
    return gather_rows(concat(outs, axis=0), _inverse_permutation(order))


def intra_primitive_attention(
    feats: Tensor,
    assignments: SequenceAssignments,
    frame_offsets: np.ndarray,
    params: dict[str, Tensor],
    prefix: str,
    cfg: ModelConfig,
) -> Tensor:
    groups = intra_group_indices(assignments, frame_offsets)
    return grouped_attention(
        feats, groups,
        params[f"{prefix}.wq.w"], params[f"{prefix}.wk.w"], params[f"{prefix}.wv.w"],
        cfg.key_dim,
    )


def _ffn(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = gelu(add(matmul(x, params[f"{prefix}.ffn1.w"]), params[f"{prefix}.ffn1.b"]))
    return add(matmul(h, params[f"{prefix}.ffn2.w"]), params[f"{prefix}.ffn2.b"])


def intra_primitive_block(
    feats: Tensor,
    assignments: SequenceAssignments,
    frame_offsets: np.ndarray,
    params: dict[str, Tensor],
    prefix: str,
    cfg: ModelConfig,
) -> Tensor:
    """Pre-LN attention and pre-LN feedforward, each with a residual."""
    h = layer_norm(feats, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    att = intra_primitive_attention(h, assignments, frame_offsets, params, prefix, cfg)
    x = add(feats, att)
    h2 = layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    return add(x, _ffn(h2, params, prefix))


# --- tokens -------------------------------------------------------------------


@dataclass
class PrimitiveTokens:
    """One token per (frame, primitive slot); padded slots are masked and 0."""

    values: Tensor                 # (L * M, C)
    mask: np.ndarray               # bool (L * M,)
    provenance: list[tuple[int, int]]  # (frame, slot) per token


@dataclass
class MemoryPool:
    """Offline primitive embeddings from the single-frame extractor."""

    values: Tensor                 # (L_mem * M, C)
    mask: np.ndarray
    source: str = ""

    def __len__(self):
        return self.values.shape[0]


def pool_primitive_tokens(
    feats: Tensor,
    assignments: SequenceAssignments,
    frame_offsets: np.ndarray,
    cfg: ModelConfig,
) -> PrimitiveTokens:
    """Max-pool point features into (frame, slot) tokens; clutter excluded."""
    L = len(assignments.per_frame)
    M = cfg.m_target
    rows, gids, mask = [], [], np.zeros(L * M, dtype=bool)
    provenance = [(t, s + 1) for t in range(L) for s in range(M)]
    n_real = 0
    select = np.zeros((L * M, 1), dtype=np.int64)
    for t, a in enumerate(assignments.per_frame):
        if a.m_actual > M:
            raise InvalidConfig(
                f"frame {t} has {a.m_actual} primitives; normalize to m_target={M}"
            )
        for pid in range(1, a.m_actual + 1):
            members = a.members(pid)
            if len(members) == 0:
                continue
            token = t * M + (pid - 1)
            mask[token] = True
            select[token] = n_real
            rows.extend(members + frame_offsets[t])
            gids.extend([n_real] * len(members))
            n_real += 1
    if n_real == 0:
        # all points are clutter: every slot is padding
        return PrimitiveTokens(
            values=constant(np.zeros((L * M, cfg.feature_dim))),
            mask=mask,
            provenance=provenance,
        )
    gathered = gather_rows(feats, np.asarray(rows, dtype=np.int64))
    pooled = group_max_pool(gathered, GroupSpec(np.asarray(gids), n_real))
    padded = concat([pooled, constant(np.zeros((1, pooled.shape[1])))], axis=0)
    select[~mask] = n_real  # zero row for padded slots
    values = gather_rows(padded, select[:, 0])
    return PrimitiveTokens(values=values, mask=mask, provenance=provenance)


def primitive_transformer(
    clip_tokens: PrimitiveTokens,
    pool: MemoryPool | None,
    params: dict[str, Tensor],
    cfg: ModelConfig,
) -> PrimitiveTokens:
    """Masked self-attention blocks over [clip tokens || memory tokens]."""
    if pool is not None and len(pool):
        if pool.values.shape[1] != clip_tokens.values.shape[1]:
            raise ConfigMismatch("memory pool feature width differs from clip tokens")
        x = concat([clip_tokens.values, pool.values], axis=0)
        mask = np.concatenate([clip_tokens.mask, pool.mask])
    else:
        x = clip_tokens.values
        mask = clip_tokens.mask
    if not mask.any():
        raise AllMasked("no real token to attend over")
    inv_sqrt = 1.0 / np.sqrt(cfg.key_dim)
    for i in range(cfg.num_primitive_blocks):
        prefix = f"prim{i}"
        h = layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
        q = matmul(h, params[f"{prefix}.wq.w"])
        k = matmul(h, params[f"{prefix}.wk.w"])
        v = matmul(h, params[f"{prefix}.wv.w"])
        att = masked_row_softmax(scale(matmul(q, transpose(k)), inv_sqrt), mask)
        x = add(x, matmul(att, v))
        h2 = layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
        x = add(x, _ffn(h2, params, prefix))
    n_clip = len(clip_tokens.mask)
    out = mask_rows(slice_axis(x, 0, 0, n_clip), clip_tokens.mask)
    return PrimitiveTokens(
        values=out, mask=clip_tokens.mask, provenance=clip_tokens.provenance
    )


# --- heads --------------------------------------------------------------------


def center_frame(cfg: ModelConfig) -> int:
    return cfg.clip_len // 2


def segmentation_head(
    point_feats: Tensor,
    intra_feats: Tensor,
    tokens: PrimitiveTokens,
    assignments: SequenceAssignments,
    frame_offsets: np.ndarray,
    params: dict[str, Tensor],
    cfg: ModelConfig,
) -> Tensor:
    """Per-point logits for the center frame.

    Each point sees its own conv feature, its intra-block feature, and its
    primitive's token; clutter points get the mean over real clip tokens.
    """
    c = center_frame(cfg)
    a = assignments.per_frame[c]
    n_c = len(a.labels)
    rows = np.arange(frame_offsets[c], frame_offsets[c] + n_c)

    real = np.flatnonzero(tokens.mask)
    if len(real) == 0:
        raise AllMasked("no real token to broadcast from")
    avg = matmul(
        constant(np.full((1, len(real)), 1.0 / len(real))),
        gather_rows(tokens.values, real),
    )
    source = concat([tokens.values, avg], axis=0)
    mean_row = len(tokens.mask)
    token_idx = np.where(
        a.labels > 0, cfg.m_target * c + a.labels - 1, mean_row
    ).astype(np.int64)

    x = concat(
        [
            gather_rows(point_feats, rows),
            gather_rows(intra_feats, rows),
            gather_rows(source, token_idx),
        ],
        axis=1,
    )
    h = gelu(add(matmul(x, params["seg1.w"]), params["seg1.b"]))
    h = gelu(add(matmul(h, params["seg2.w"]), params["seg2.b"]))
    return add(matmul(h, params["seg3.w"]), params["seg3.b"])


def action_head(tokens: PrimitiveTokens, params: dict[str, Tensor]) -> Tensor:
    """Masked max over tokens, then a two-layer MLP; returns (1, K) logits."""
    real = np.flatnonzero(tokens.mask)
    if len(real) == 0:
        raise AllMasked("no real token to classify from")
    gathered = gather_rows(tokens.values, real)
    pooled = group_max_pool(gathered, GroupSpec(np.zeros(len(real), dtype=np.int64), 1))
    h = gelu(add(matmul(pooled, params["cls1.w"]), params["cls1.b"]))
    return add(matmul(h, params["cls2.w"]), params["cls2.b"])


# --- full forward -------------------------------------------------------------


def encode_points(
    seq: PointSequence,
    assignments: SequenceAssignments,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    plan: ConvPlan | None = None,
) -> tuple[Tensor, Tensor, ConvPlan]:
    """Conv backbone plus intra blocks; returns (point_feats, intra_feats)."""
    if plan is None:
        plan = prepare_clip(seq, cfg)
    feats: Tensor = constant(np.ones((plan.n_total, cfg.input_dim)))
    for i in range(cfg.num_conv_layers):
        feats = point4d_conv(plan, feats, params[f"conv{i}.w_d"], params[f"conv{i}.w_f"])
    point_feats = feats
    for i in range(cfg.num_intra_blocks):
        feats = intra_primitive_block(
            feats, assignments, plan.frame_offsets, params, f"intra{i}", cfg
        )
    return point_feats, feats, plan


def primformer_forward(
    seq: PointSequence,
    assignments: SequenceAssignments,
    pool: MemoryPool | None,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    task: str,
    plan: ConvPlan | None = None,
) -> Tensor:
    """Logits for one clip: (N_center, K) for segmentation, (1, K) for
    classification."""
    if len(seq) != cfg.clip_len:
        raise InvalidConfig(f"clip has {len(seq)} frames, config says {cfg.clip_len}")
    if len(assignments.per_frame) != cfg.clip_len:
        raise InvalidConfig("need one assignment per clip frame")
    point_feats, intra_feats, plan = encode_points(seq, assignments, params, cfg, plan)
    tokens = pool_primitive_tokens(intra_feats, assignments, plan.frame_offsets, cfg)
    tokens = primitive_transformer(tokens, pool, params, cfg)
    if task == "segmentation":
        return segmentation_head(
            point_feats, intra_feats, tokens, assignments, plan.frame_offsets,
            params, cfg,
        )
    if task == "classification":
        return action_head(tokens, params)
    raise InvalidConfig(f"unknown task {task!r}")


def build_memory_pool(
    seq: PointSequence,
    assignments: SequenceAssignments,
    extractor: ModelWeights,
    cfg: ModelConfig,
) -> MemoryPool:
    """Run the single-frame extractor per frame and pool per primitive.

    Pure inference: the pool holds constants regardless of later tapes.
    """
    ecfg = extractor.config
    if ecfg.feature_dim != cfg.feature_dim:
        raise ConfigMismatch(
            f"extractor feature_dim {ecfg.feature_dim} != config {cfg.feature_dim}"
        )
    if ecfg.clip_len != 1 or ecfg.memory_len != 0 or ecfg.temporal_radius != 0:
        raise ConfigMismatch("extractor must be a single-frame model (L=1, L'=0, r_t=0)")
    if ecfg.m_target != cfg.m_target:
        raise ConfigMismatch("extractor m_target differs")
    params = extractor.as_tensors()
    values = []
    mask = []
    for t, frame in enumerate(seq.frames):
        one = PointSequence(frames=[_reindexed(frame)])
        sub = SequenceAssignments(per_frame=[assignments.per_frame[t]])
        _, intra_feats, plan = encode_points(one, sub, params, ecfg)
        tokens = pool_primitive_tokens(intra_feats, sub, plan.frame_offsets, ecfg)
        values.append(tokens.values.data)
        mask.append(tokens.mask)
    return MemoryPool(
        values=constant(np.vstack(values)) if values else constant(np.zeros((0, cfg.feature_dim))),
        mask=np.concatenate(mask) if mask else np.zeros(0, dtype=bool),
    )


def _reindexed(frame):
    from .geometry import PointFrame

    return PointFrame(
        positions=frame.positions,
        normals=frame.normals,
        labels=frame.labels,
        frame_index=0,
    )


def empty_pool(cfg: ModelConfig) -> MemoryPool:
    return MemoryPool(
        values=constant(np.zeros((0, cfg.feature_dim))),
        mask=np.zeros(0, dtype=bool),
    )


# --- checkpoint container -----------------------------------------------------

_MAGIC = "primformer-container"
CONTAINER_VERSION = 1


def save_container(path: str, kind: str, config_kv: dict, arrays: dict[str, np.ndarray]):
    """Text header (config echo + array manifest) then raw little-endian f64."""
    header = [f"{_MAGIC} v{CONTAINER_VERSION} kind={kind}", "[config]"]
    header += [f"{k}={v}" for k, v in config_kv.items()]
    header.append("[arrays]")
    for name, arr in arrays.items():
        dims = ",".join(str(d) for d in arr.shape) if arr.ndim else "0"
        header.append(f"{name} {dims}")
    header.append("[data]")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_container(path: str) -> tuple[str, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"[data]\n"
    split = blob.index(marker)
    lines = blob[:split].decode("utf-8").splitlines()
    payload = blob[split + len(marker):]
    head = lines[0].split()
    if head[0] != _MAGIC or head[1] != f"v{CONTAINER_VERSION}":
        raise ConfigMismatch(f"not a supported container: {lines[0]!r}")
    kind = head[2].split("=", 1)[1]
    config_kv: dict[str, str] = {}
    manifest: list[tuple[str, tuple[int, ...]]] = []
    section = None
    for line in lines[1:]:
        if line in ("[config]", "[arrays]"):
            section = line
            continue
        if section == "[config]":
            k, v = line.split("=", 1)
            config_kv[k] = v
        elif section == "[arrays]":
            name, dims = line.rsplit(" ", 1)
            shape = () if dims == "0" else tuple(int(d) for d in dims.split(","))
            manifest.append((name, shape))
    arrays: dict[str, np.ndarray] = {}
    cursor = 0
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=cursor)
        arrays[name] = arr.reshape(shape).astype(np.float64)
        cursor += count * 8
    return kind, config_kv, arrays


def save_weights(weights: ModelWeights, path: str):
    save_container(path, "weights", weights.config.to_kv(), weights.arrays)


def load_weights(path: str) -> ModelWeights:
    kind, kv, arrays = load_container(path)
    if kind != "weights":
        raise ConfigMismatch(f"expected a weights container, got kind={kind}")
    return ModelWeights(config=ModelConfig.from_kv(kv), arrays=arrays)


def save_pool(pool: MemoryPool, cfg: ModelConfig, path: str):
    save_container(
        path,
        "pool",
        {"feature_dim": cfg.feature_dim, "m_target": cfg.m_target},
        {"values": pool.values.data, "mask": pool.mask.astype(np.float64)},
    )


def load_pool(path: str) -> MemoryPool:
    kind, _, arrays = load_container(path)
    if kind != "pool":
        raise ConfigMismatch(f"expected a pool container, got kind={kind}")
    return MemoryPool(
        values=constant(arrays["values"]), mask=arrays["mask"] > 0.5
    )
