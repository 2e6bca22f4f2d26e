"""Tiny vision-language-action transformer shared by student and oracle teacher.

Layout of one decoder sequence::

    [BOS, instruction, ego, visual x48,
     (future marker, (future ego, future visual x48) x T),   teacher only
     (coarse marker, coarse tokens x2T),                      refinement only
     trajectory inputs x2T]

The trajectory block's inputs are ``[BOS, w_1 .. w_{2T-1}]`` so the output at
block row ``j`` predicts token ``w_j``. Every block carries its own positional
table, which keeps trajectory rows aligned between teacher and student
sequences of different lengths. Prefix rows attend to the whole prefix;
trajectory rows attend to the prefix and causally to earlier trajectory rows.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import scenario as sc
from .autodiff import RngStream, Tensor

D_MODEL = 64
N_HEADS = 4
MLP_RATIO = 4
ENC_BLOCKS = 2
DEC_BLOCKS = 4
PATCH = 4
PATCHES_PER_VIEW = (sc.GRID // PATCH) ** 2
N_VISUAL = sc.N_VIEWS * PATCHES_PER_VIEW
N_TRAJ = 2 * sc.T

# vocabulary
X_OFFSET = 0
Y_OFFSET = sc.N_BINS
INSTR_OFFSET = 2 * sc.N_BINS
BOS = INSTR_OFFSET + 3
EOS = BOS + 1
PAD = BOS + 2
COARSE = BOS + 3
VOCAB = COARSE + 1

SEG_PREFIX, SEG_VISUAL, SEG_FMARK, SEG_FEGO, SEG_FVIS, SEG_COARSE, SEG_TRAJ = range(7)
N_SEGMENTS = 7

EGO_SCALE = np.array([16.0, 16.0, 10.0, sc.A_MAX, sc.STEER_MAX], dtype=np.float32)
MAX_PARAMS = 1_500_000


# --------------------------------------------------------------------------
# tokens


def trajectory_tokens(wps: np.ndarray) -> np.ndarray:
    bins, _ = sc.quantize(wps)
    tok = bins.copy()
    tok[1::2] += Y_OFFSET
    return tok


def tokens_to_waypoints(tokens) -> np.ndarray:
    tok = np.asarray(tokens, dtype=np.int64).reshape(-1).copy()
    tok[1::2] -= Y_OFFSET
    if tok.min() < 0 or tok.max() >= sc.N_BINS:
        raise ValueError("tokens are not interleaved x/y coordinate ids")
    return sc.dequantize(tok)


def patchify(views: np.ndarray) -> np.ndarray:
    """(B, 3, 16, 16) rasters -> (B, 48, 16) flattened 4x4 patches, view-major."""
    v = np.asarray(views, dtype=np.float32)
    if v.shape[-3:] != (sc.N_VIEWS, sc.GRID, sc.GRID):
        raise ValueError(f"expected rasters of shape (..., 3, 16, 16), got {v.shape}")
    lead = v.shape[:-3]
    g = sc.GRID // PATCH
    p = v.reshape(*lead, sc.N_VIEWS, g, PATCH, g, PATCH)
    p = np.moveaxis(p, -2, -3)  # (..., V, gr, gc, PATCH, PATCH)
    return np.ascontiguousarray(p.reshape(*lead, N_VISUAL, PATCH * PATCH))


# --------------------------------------------------------------------------
# parameters


def _normal(stream: RngStream, shape, std=0.02) -> np.ndarray:
    return (stream.normal(tuple(shape)) * std).astype(np.float32)


def _linear(params, name, n_in, n_out, stream, bias=True):
    params[f"{name}.w"] = Tensor(_normal(stream.child(name), (n_in, n_out), 1.0 / math.sqrt(n_in)), True, name)
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(n_out, np.float32), True, f"{name}.b")


def _ln(params, name):
    params[f"{name}.g"] = Tensor(np.ones(D_MODEL, np.float32), True)
    params[f"{name}.b"] = Tensor(np.zeros(D_MODEL, np.float32), True)


def init_block(params: dict, prefix: str, stream: RngStream) -> None:
    _ln(params, f"{prefix}.ln1")
    for n in ("wq", "wk", "wv", "wo"):
        _linear(params, f"{prefix}.attn.{n}", D_MODEL, D_MODEL, stream)
    _ln(params, f"{prefix}.ln2")
    _linear(params, f"{prefix}.mlp.fc1", D_MODEL, MLP_RATIO * D_MODEL, stream)
    _linear(params, f"{prefix}.mlp.fc2", MLP_RATIO * D_MODEL, D_MODEL, stream)
    # damp residual branches at init
    params[f"{prefix}.attn.wo.w"].data *= 0.5
    params[f"{prefix}.mlp.fc2.w"].data *= 0.5


def init_encoder(stream: RngStream) -> dict:
    p: dict[str, Tensor] = {}
    _linear(p, "encoder.patch", PATCH * PATCH, D_MODEL, stream)
    p["encoder.pos"] = Tensor(_normal(stream.child("pos"), (PATCHES_PER_VIEW, D_MODEL)), True)
    p["encoder.view"] = Tensor(_normal(stream.child("view"), (sc.N_VIEWS, D_MODEL)), True)
    for i in range(ENC_BLOCKS):
        init_block(p, f"encoder.block{i}", stream.child(f"block{i}"))
    _ln(p, "encoder.ln_f")
    return p


def init_decoder(stream: RngStream) -> dict:
    p: dict[str, Tensor] = {}
    p["decoder.tok"] = Tensor(_normal(stream.child("tok"), (VOCAB, D_MODEL)), True)
    _linear(p, "decoder.ego", 5, D_MODEL, stream)
    _linear(p, "decoder.fego", 5, D_MODEL, stream)
    p["decoder.seg"] = Tensor(_normal(stream.child("seg"), (N_SEGMENTS, D_MODEL)), True)
    p["decoder.prefix_pos"] = Tensor(_normal(stream.child("ppos"), (3, D_MODEL)), True)
    p["decoder.fstep"] = Tensor(_normal(stream.child("fstep"), (sc.T, D_MODEL)), True)
    p["decoder.coarse_pos"] = Tensor(_normal(stream.child("cpos"), (1, D_MODEL)), True)
    p["decoder.traj_pos"] = Tensor(_normal(stream.child("tpos"), (N_TRAJ, D_MODEL)), True)
    p["decoder.fmark"] = Tensor(_normal(stream.child("fmark"), (1, D_MODEL)), True)
    for i in range(DEC_BLOCKS):
        init_block(p, f"decoder.block{i}", stream.child(f"block{i}"))
    _ln(p, "decoder.ln_f")
    p["decoder.lm_head.w"] = Tensor(_normal(stream.child("lm_head"), (D_MODEL, VOCAB)), True)
    return p


def params_digest(params: dict[str, Tensor]) -> str:
    """Hash of parameter names and bytes, for bitwise stability checks."""
    h = hashlib.blake2b(digest_size=16)
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.hexdigest()


class VLAModel:
    """Parameter container; all computation lives in module-level functions."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params
        self.sft_steps = 0  # optimizer steps taken on trajectory supervision
        n = self.num_parameters()
        if n >= MAX_PARAMS:
            raise ValueError(f"model has {n} parameters, budget is {MAX_PARAMS}")

    @classmethod
    def create(cls, seed: int) -> "VLAModel":
        root = RngStream("init", seed)
        params = init_encoder(root.child("encoder"))
        params.update(init_decoder(root.child("decoder")))
        return cls(params)

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def encoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("encoder.")}

    def copy(self) -> "VLAModel":
        return VLAModel({k: Tensor(v.data.copy(), v.requires_grad, k) for k, v in self.params.items()})

    def fingerprint(self, prefix: str = "") -> str:
        return params_digest({k: v for k, v in self.params.items() if k.startswith(prefix)})

    def freeze(self) -> "VLAModel":
        for t in self.params.values():
            t.requires_grad = False
        return self


# --------------------------------------------------------------------------
# building blocks


def linear(p, name, x: Tensor) -> Tensor:
    y = ad.matmul(x, p[f"{name}.w"])
    b = p.get(f"{name}.b")
    return ad.add(y, b) if b is not None else y


def attention(
    p, prefix: str, x: Tensor, mask: np.ndarray | None, past: tuple[Tensor, Tensor] | None = None, keep: list | None = None
) -> Tensor:
    """Multi-head self-attention.

    ``past`` holds head-split keys/values of earlier rows that ``x`` may also
    attend to; ``keep`` collects this call's keys/values for later reuse.
    """
    B, L, D = x.shape
    dh = D // N_HEADS

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, L, N_HEADS, dh)), (0, 2, 1, 3))

    q = heads(linear(p, f"{prefix}.wq", x))
    k = heads(linear(p, f"{prefix}.wk", x))
    v = heads(linear(p, f"{prefix}.wv", x))
    if keep is not None:
        keep.append((k, v))
    if past is not None:
        k = ad.concat_rows([past[0], k], axis=2)
        v = ad.concat_rows([past[1], v], axis=2)
    scores = ad.matmul(ad.scale(q, 1.0 / math.sqrt(dh)), ad.transpose(k))
    att = ad.softmax_t(scores, 1.0, mask=mask)
    out = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, L, D))
    return linear(p, f"{prefix}.wo", out)


def block_forward(
    p,
    prefix: str,
    x: Tensor,
    mask: np.ndarray | None,
    dropout_p: float = 0.0,
    stream: RngStream | None = None,
    past: tuple[Tensor, Tensor] | None = None,
    keep: list | None = None,
) -> Tensor:
    """Pre-norm transformer block; ``mask`` True means attend."""
    h = ad.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    a = attention(p, f"{prefix}.attn", h, mask, past, keep)
    if dropout_p > 0:
        a = ad.dropout(a, dropout_p, stream.child(prefix, "attn"))
    x = ad.add(x, a)
    h = ad.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    m = linear(p, f"{prefix}.mlp.fc2", ad.gelu(linear(p, f"{prefix}.mlp.fc1", h)))
    if dropout_p > 0:
        m = ad.dropout(m, dropout_p, stream.child(prefix, "mlp"))
    return ad.add(x, m)


# --------------------------------------------------------------------------
# visual encoder


def encode_views(views: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """(B, 3, 16, 16) rasters -> (B, 48, 64) visual tokens."""
    v = np.asarray(views, dtype=np.float32)
    if v.ndim == 3:
        v = v[None]
    patches = Tensor(patchify(v))
    x = linear(params, "encoder.patch", patches)
    view_ids = np.repeat(np.arange(sc.N_VIEWS), PATCHES_PER_VIEW)
    pos_ids = np.tile(np.arange(PATCHES_PER_VIEW), sc.N_VIEWS)
    x = ad.add(x, ad.add(ad.embedding_lookup(params["encoder.pos"], pos_ids), ad.embedding_lookup(params["encoder.view"], view_ids)))
    for i in range(ENC_BLOCKS):
        x = block_forward(params, f"encoder.block{i}", x, None)
    return ad.layer_norm(x, params["encoder.ln_f.g"], params["encoder.ln_f.b"])


# --------------------------------------------------------------------------
# decoder


@dataclass
class Batch:
    """Stacked observation arrays for a list of samples."""

    views: np.ndarray  # (B, 3, 16, 16)
    ego: np.ndarray  # (B, 5)
    instruction: np.ndarray  # (B,)
    targets: np.ndarray  # (B, 2T) ground-truth trajectory tokens
    future_views: np.ndarray | None = None  # (B, T, 3, 16, 16)
    future_ego: np.ndarray | None = None  # (B, T, 5)
    ids: tuple[str, ...] = ()

    @classmethod
    def from_samples(cls, samples) -> "Batch":
        return cls(
            views=np.stack([s.views for s in samples]),
            ego=np.stack([s.ego_state for s in samples]),
            instruction=np.array([s.instruction_id for s in samples], dtype=np.int64),
            targets=np.stack([trajectory_tokens(s.waypoints) for s in samples]),
            future_views=np.stack([s.future_views for s in samples]),
            future_ego=np.stack([s.future_ego for s in samples]),
            ids=tuple(s.sample_id for s in samples),
        )

    def __len__(self) -> int:
        return len(self.views)


@dataclass
class ForwardOutput:
    """Final-layer states and logits at the 2T trajectory rows.

    ``trajectory_span`` locates those rows inside the full decoder sequence.
    """

    hidden: Tensor  # (B, 2T, D)
    logits: Tensor  # (B, 2T, V)
    trajectory_span: tuple[int, int]

    @property
    def n_traj(self) -> int:
        return self.trajectory_span[1] - self.trajectory_span[0]


def _add_rows(x: Tensor, *rows: Tensor) -> Tensor:
    for r in rows:
        x = ad.add(x, r)
    return x


def _seg(p, seg_id: int) -> Tensor:
    return ad.embedding_lookup(p["decoder.seg"], np.array([seg_id]))


def observation_prefix(p, batch: Batch, visual: Tensor) -> Tensor:
    """[BOS, instruction, ego, visual x48] embeddings, (B, 51, D)."""
    B = len(batch)
    ids = np.stack([np.full(B, BOS), INSTR_OFFSET + batch.instruction], axis=1)
    tok = ad.embedding_lookup(p["decoder.tok"], ids)
    ego = ad.reshape(linear(p, "decoder.ego", Tensor(batch.ego / EGO_SCALE)), (B, 1, D_MODEL))
    head = ad.concat_rows([tok, ego])
    head = _add_rows(head, p["decoder.prefix_pos"], _seg(p, SEG_PREFIX))
    vis = ad.add(visual, _seg(p, SEG_VISUAL))
    return ad.concat_rows([head, vis])


def future_block(p, batch: Batch, future_visual: Tensor) -> Tensor:
    """Marker followed by (future ego, 48 future visual tokens) per future step."""
    if batch.future_views is None or batch.future_ego is None:
        raise ValueError("teacher sequence needs future observations")
    B = len(batch)
    mark = ad.broadcast_rows(ad.add(p["decoder.fmark"], _seg(p, SEG_FMARK)), (B, 1, D_MODEL))
    fego = linear(p, "decoder.fego", Tensor(batch.future_ego / EGO_SCALE))  # (B, T, D)
    fego = _add_rows(fego, p["decoder.fstep"], _seg(p, SEG_FEGO))
    fvis = ad.reshape(future_visual, (B, sc.T, N_VISUAL, D_MODEL))
    step = ad.reshape(p["decoder.fstep"], (sc.T, 1, D_MODEL))
    fvis = _add_rows(fvis, step, _seg(p, SEG_FVIS))
    steps = ad.concat_rows([ad.reshape(fego, (B, sc.T, 1, D_MODEL)), fvis])  # (B, T, 49, D)
    return ad.concat_rows([mark, ad.reshape(steps, (B, sc.T * (N_VISUAL + 1), D_MODEL))])


def coarse_block(p, coarse_tokens: np.ndarray) -> Tensor:
    ct = np.asarray(coarse_tokens, dtype=np.int64)
    if ct.ndim != 2 or ct.shape[1] != N_TRAJ:
        raise ValueError(f"coarse trajectory must be (B, {N_TRAJ}) tokens, got {ct.shape}")
    ids = np.concatenate([np.full((len(ct), 1), COARSE), ct], axis=1)
    e = ad.embedding_lookup(p["decoder.tok"], ids)
    # coarse token i shares the position code of the trajectory row that predicts token i
    aligned = ad.concat_rows([ad.embedding_lookup(p["decoder.coarse_pos"], np.array([0])), p["decoder.traj_pos"]])
    return _add_rows(e, aligned, _seg(p, SEG_COARSE))


def trajectory_inputs(p, tokens: np.ndarray) -> Tensor:
    tk = np.asarray(tokens, dtype=np.int64)
    if tk.ndim != 2 or tk.shape[1] != N_TRAJ:
        raise ValueError(f"trajectory must be (B, {N_TRAJ}) tokens, got {tk.shape}")
    ids = np.concatenate([np.full((len(tk), 1), BOS), tk[:, :-1]], axis=1)
    e = ad.embedding_lookup(p["decoder.tok"], ids)
    return _add_rows(e, p["decoder.traj_pos"], _seg(p, SEG_TRAJ))


def prefix_lm_mask(n_prefix: int, n_traj: int = N_TRAJ) -> np.ndarray:
    L = n_prefix + n_traj
    m = np.zeros((L, L), dtype=bool)
    m[:, :n_prefix] = True
    m[n_prefix:, n_prefix:] = np.tril(np.ones((n_traj, n_traj), dtype=bool))
    return m


def build_prefix(
    model: VLAModel,
    batch: Batch,
    visual: Tensor | None = None,
    future: bool = False,
    coarse_tokens: np.ndarray | None = None,
) -> Tensor:
    p = model.params
    if visual is None:
        visual = encode_views(batch.views, p)
    parts = [observation_prefix(p, batch, visual)]
    if future:
        B = len(batch)
        fv = batch.future_views.reshape(B * sc.T, sc.N_VIEWS, sc.GRID, sc.GRID)
        parts.append(future_block(p, batch, encode_views(fv, p)))
    if coarse_tokens is not None:
        parts.append(coarse_block(p, coarse_tokens))
    return ad.concat_rows(parts) if len(parts) > 1 else parts[0]


def decode(
    model: VLAModel,
    prefix: Tensor,
    traj_tokens: np.ndarray,
    dropout_p: float = 0.0,
    stream: RngStream | None = None,
) -> ForwardOutput:
    p = model.params
    n_prefix = prefix.shape[1]
    x = ad.concat_rows([prefix, trajectory_inputs(p, traj_tokens)])
    mask = prefix_lm_mask(n_prefix)
    if dropout_p > 0 and stream is None:
        raise ValueError("dropout needs an RngStream")
    for i in range(DEC_BLOCKS):
        x = block_forward(p, f"decoder.block{i}", x, mask, dropout_p, stream)
    x = ad.take_slice(x, n_prefix, n_prefix + N_TRAJ, axis=1)
    h = ad.layer_norm(x, p["decoder.ln_f.g"], p["decoder.ln_f.b"])
    logits = lm_head(p, h)
    return ForwardOutput(h, logits, (n_prefix, n_prefix + N_TRAJ))


def lm_head(p, h: Tensor) -> Tensor:
    return ad.matmul(h, p["decoder.lm_head.w"])


def lm_head_np(p, h: np.ndarray) -> np.ndarray:
    """Output projection on raw arrays; bit-identical to ``lm_head`` for equal inputs."""
    return np.asarray(h, dtype=np.float32) @ p["decoder.lm_head.w"].data


def forward_teacher_forced(
    model: VLAModel,
    batch: Batch,
    targets: np.ndarray | None = None,
    dropout_p: float = 0.0,
    stream: RngStream | None = None,
    future: bool = False,
    coarse_tokens: np.ndarray | None = None,
    visual: Tensor | None = None,
) -> ForwardOutput:
    """Teacher-forced pass over ``targets`` (defaults to the batch ground truth)."""
    tg = batch.targets if targets is None else targets
    prefix = build_prefix(model, batch, visual, future, coarse_tokens)
    return decode(model, prefix, tg, dropout_p, stream)


def nll_loss(out: ForwardOutput, targets: np.ndarray) -> Tensor:
    tg = np.asarray(targets)
    if tg.shape[-1] != out.n_traj:
        raise ValueError(f"{tg.shape[-1]} targets for a trajectory span of {out.n_traj}")
    return ad.cross_entropy(out.logits, tg)


def _allowed_mask() -> np.ndarray:
    allowed = np.zeros((N_TRAJ, VOCAB), dtype=bool)
    allowed[0::2, X_OFFSET : X_OFFSET + sc.N_BINS] = True
    allowed[1::2, Y_OFFSET : Y_OFFSET + sc.N_BINS] = True
    return allowed


ALLOWED = _allowed_mask()


def prefix_cache(model: VLAModel, prefix: Tensor) -> list[tuple[Tensor, Tensor]]:
    """Per-layer keys/values of the prefix rows.

    Under the prefix-LM mask prefix rows never see trajectory rows, so their
    states are the same whatever trajectory follows. Inference only.
    """
    p = model.params
    keep: list[tuple[Tensor, Tensor]] = []
    with ad.no_grad():
        x = prefix
        for i in range(DEC_BLOCKS):
            x = block_forward(p, f"decoder.block{i}", x, None, keep=keep)
    return keep


def decode_cached(model: VLAModel, cache: list[tuple[Tensor, Tensor]], traj_tokens: np.ndarray) -> ForwardOutput:
    """Trajectory rows only, attending to cached prefix keys/values."""
    p = model.params
    n_prefix = cache[0][0].shape[2]
    mask = prefix_lm_mask(n_prefix)[n_prefix:]
    with ad.no_grad():
        x = trajectory_inputs(p, traj_tokens)
        for i in range(DEC_BLOCKS):
            x = block_forward(p, f"decoder.block{i}", x, mask, past=cache[i])
        h = ad.layer_norm(x, p["decoder.ln_f.g"], p["decoder.ln_f.b"])
        logits = lm_head(p, h)
    return ForwardOutput(h, logits, (n_prefix, n_prefix + N_TRAJ))


def generate(
    model: VLAModel,
    batch: Batch,
    future: bool = False,
    coarse_tokens: np.ndarray | None = None,
) -> tuple[np.ndarray, ForwardOutput]:
    """Greedy autoregressive decoding restricted to coordinate tokens.

    Each row's hidden state and logits are taken from the step that produced
    that row's token.
    """
    with ad.no_grad():
        cache = prefix_cache(model, build_prefix(model, batch, None, future, coarse_tokens))
        B = len(batch)
        tokens = np.full((B, N_TRAJ), PAD, dtype=np.int64)
        hidden = np.zeros((B, N_TRAJ, D_MODEL), np.float32)
        logits = np.zeros((B, N_TRAJ, VOCAB), np.float32)
        for j in range(N_TRAJ):
            out = decode_cached(model, cache, tokens)
            lj = out.logits.data[:, j]
            hidden[:, j] = out.hidden.data[:, j]
            logits[:, j] = lj
            masked = np.where(ALLOWED[j], lj, -np.inf)
            tokens[:, j] = np.argmax(masked, axis=-1)
    span = out.trajectory_span
    return tokens, ForwardOutput(Tensor(hidden), Tensor(logits), span)
