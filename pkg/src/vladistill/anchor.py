"""Self-anchored visual distillation.

A frozen copy of the student's visual encoder, taken before trajectory
fine-tuning, anchors the student's visual tokens. AnchorFormer decides per
token how strongly: one full-attention block over
``[anchor visual tokens, prompt, ego, ground-truth trajectory, queries]``
followed by a linear scorer on the visual rows, modulated by the pooled
queries.
"""
from __future__ import annotations

import csv
import os
import tempfile
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import RngStream, Tensor

N_QUERIES = 4
TAU_V = 2.0
PREFIX = "anchorformer"


class AnchorError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# self-anchor teacher


class SelfAnchorTeacher:
    """Frozen visual encoder snapshot; never receives gradients."""

    def __init__(self, encoder_params: dict[str, Tensor]):
        self.params = {k: Tensor(v.data.copy(), False, k) for k, v in encoder_params.items()}
        for k, v in encoder_params.items():
            if self.params[k].data.tobytes() != v.data.tobytes():
                raise AnchorError(f"anchor copy of {k} is not bitwise equal")
        self.digest = M.params_digest(self.params)

    def encode(self, views: np.ndarray) -> Tensor:
        with ad.no_grad():
            z = M.encode_views(views, self.params)
        return Tensor(z.data)

    def check_frozen(self) -> None:
        if M.params_digest(self.params) != self.digest:
            raise AnchorError("self-anchor encoder parameters changed")


def make_self_anchor_teacher(student: M.VLAModel) -> SelfAnchorTeacher:
    if student.sft_steps > 0:
        raise AnchorError("self-anchor copy must be taken before fine-tuning starts")
    return SelfAnchorTeacher(student.encoder_params())


# --------------------------------------------------------------------------
# AnchorFormer


def init_anchorformer(decoder_params: dict[str, Tensor], seed: int) -> dict[str, Tensor]:
    """AnchorLayer copied from the final decoder block; fresh scorer and queries."""
    src = f"decoder.block{M.DEC_BLOCKS - 1}."
    p = {
        f"{PREFIX}.layer.{k[len(src):]}": Tensor(v.data.copy(), True)
        for k, v in decoder_params.items()
        if k.startswith(src)
    }
    if not p:
        raise KeyError("decoder parameters lack a final block")
    stream = RngStream("anchorformer", seed)
    p[f"{PREFIX}.scorer.w"] = Tensor((0.02 * stream.child("scorer").normal((M.D_MODEL, 1))).astype(np.float32), True)
    p[f"{PREFIX}.scorer.b"] = Tensor(np.zeros(1, np.float32), True)
    p[f"{PREFIX}.queries"] = Tensor((0.02 * stream.child("queries").normal((N_QUERIES, M.D_MODEL))).astype(np.float32), True)
    return p


def anchor_context(embed_params: dict[str, Tensor], batch: M.Batch) -> tuple[Tensor, Tensor, Tensor]:
    """Prompt, ego and ground-truth trajectory embeddings from a frozen decoder.

    Returned as constants: (B, 1, D), (B, 1, D), (B, 2T, D).
    """
    p = embed_params
    with ad.no_grad():
        z_p = ad.embedding_lookup(p["decoder.tok"], (M.INSTR_OFFSET + batch.instruction)[:, None])
        z_s = M.linear(p, "decoder.ego", Tensor((batch.ego / M.EGO_SCALE)[:, None, :]))
        z_w = ad.add(ad.embedding_lookup(p["decoder.tok"], batch.targets), p["decoder.traj_pos"])
    return Tensor(z_p.data), Tensor(z_s.data), Tensor(z_w.data)


def anchor_scores(z_v_tea: Tensor, z_p: Tensor, z_s: Tensor, z_w_star: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Zero-mean per-token scores S_a, shape (B, N_v)."""
    parts = [z_v_tea, z_p, z_s, z_w_star]
    for t in parts:
        if t.shape[-1] != M.D_MODEL:
            raise ValueError(f"token width {t.shape[-1]} != {M.D_MODEL}")
    B, n_v = z_v_tea.shape[0], z_v_tea.shape[1]
    q = ad.broadcast_rows(params[f"{PREFIX}.queries"], (B, N_QUERIES, M.D_MODEL))
    x = ad.concat_rows(parts + [q])
    x = M.block_forward(params, f"{PREFIX}.layer", x, None)
    sizes = [n_v, x.shape[1] - n_v - N_QUERIES, N_QUERIES]
    zv, _, qq = ad.split_rows(x, sizes)
    q_bar = ad.reshape(ad.mean(qq, axis=1), (B, 1, M.D_MODEL))
    s = ad.reshape(M.linear(params, f"{PREFIX}.scorer", ad.mul(zv, q_bar)), (B, n_v))
    return ad.sub(s, ad.reshape(ad.mean(s, axis=1), (B, 1)))


# float32 sigmoid rounds to exactly 1.0 beyond ~17; clamping keeps weights strictly inside (0, 1)
LOGIT_BOUND = 16.0


def anchor_weights_from_scores(scores: Tensor, tau_v: float = TAU_V) -> Tensor:
    return ad.sigmoid(ad.clip(ad.scale(scores, 1.0 / tau_v), -LOGIT_BOUND, LOGIT_BOUND))


def anchor_forward(
    z_v_tea: Tensor, z_p: Tensor, z_s: Tensor, z_w_star: Tensor, params: dict[str, Tensor], tau_v: float = TAU_V
) -> Tensor:
    """Per-visual-token anchor weights in (0, 1), shape (B, N_v)."""
    return anchor_weights_from_scores(anchor_scores(z_v_tea, z_p, z_s, z_w_star, params), tau_v)


def visual_distill_loss(z_v_tea: Tensor, z_v_stu: Tensor, weights: Tensor | np.ndarray) -> Tensor:
    """(1/N_v) sum_i W_i ||z_tea_i - z_stu_i||^2, averaged over the batch.

    The anchor side is detached; gradients reach the student tokens and,
    when ``weights`` is a tensor on the tape, AnchorFormer.
    """
    if z_v_tea.shape != z_v_stu.shape:
        raise ValueError(f"visual token shapes differ: {z_v_tea.shape} vs {z_v_stu.shape}")
    w_shape = np.shape(weights.data if isinstance(weights, Tensor) else weights)
    if w_shape[-1] != z_v_tea.shape[-2]:
        raise ValueError(f"{w_shape[-1]} weights for {z_v_tea.shape[-2]} tokens")
    return ad.mse(z_v_stu, Tensor(z_v_tea.data), weights)


# --------------------------------------------------------------------------
# inspection


def dump_weight_map(path, sample_ids, weights: np.ndarray) -> Path:
    """CSV rows (sample_id, view, token_row, token_col, weight)."""
    path = Path(path)
    w = np.asarray(weights).reshape(len(sample_ids), M.N_VISUAL)
    side = int(round(np.sqrt(M.PATCHES_PER_VIEW)))
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(["sample_id", "view", "token_row", "token_col", "weight"])
        for sid, row in zip(sample_ids, w):
            for i, val in enumerate(row):
                view, k = divmod(i, M.PATCHES_PER_VIEW)
                out.writerow([sid, view, k // side, k % side, repr(float(val))])
    os.replace(tmp, path)
    return path
