"""Three training stages: encoder pretraining, oracle teacher, distilled student.

Every random choice (batch order, masks, coarse/fine modes, dropout) comes
from an ``RngStream`` keyed by stage, epoch and step, so a run is a pure
function of its config and data.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import anchor as A
from . import autodiff as ad
from . import evaluation as E
from . import model as M
from . import oracle as O
from .autodiff import AdamState, RngStream, Tensor
from .config import TrainConfig

MASK_RATIO = 0.25


class FrozenParameterError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# reports


@dataclass
class StepLog:
    total: float
    nll: float
    l_a: float = 0.0
    l_h: float = 0.0
    l_l: float = 0.0


@dataclass
class EpochRecord:
    epoch: int
    total: float
    nll: float
    l_a: float
    l_h: float
    l_l: float
    val_l2_1s: float = math.nan
    val_l2_2s: float = math.nan
    val_l2_3s: float = math.nan
    val_l2_avg: float = math.nan
    val_col_1s: float = math.nan
    val_col_2s: float = math.nan
    val_col_3s: float = math.nan
    val_col_avg: float = math.nan
    wall_clock: float = 0.0


REPORT_COLUMNS = [f.name for f in fields(EpochRecord) if f.name != "wall_clock"]


@dataclass
class TrainReport:
    """Per-epoch losses and validation metrics.

    ``to_csv`` leaves out wall-clock time so equal runs give equal bytes;
    ``timing_csv`` carries it separately.
    """

    stage: str
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[StepLog] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.epochs:
            w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in REPORT_COLUMNS[1:]])
        return buf.getvalue()

    def timing_csv(self) -> str:
        return "epoch,wall_clock\n" + "".join(f"{r.epoch},{r.wall_clock:.3f}\n" for r in self.epochs)


def _attach_eval(rec: EpochRecord, rep: E.EvalReport) -> EpochRecord:
    return replace(
        rec,
        val_l2_1s=rep.l2_1s,
        val_l2_2s=rep.l2_2s,
        val_l2_3s=rep.l2_3s,
        val_l2_avg=rep.l2_avg,
        val_col_1s=rep.col_1s,
        val_col_2s=rep.col_2s,
        val_col_3s=rep.col_3s,
        val_col_avg=rep.col_avg,
    )


# --------------------------------------------------------------------------
# shared plumbing


def batch_order(n: int, seed: int, stage: str, epoch: int) -> np.ndarray:
    u = RngStream("shuffle", seed).child(stage, epoch).uniform((n,))
    return np.argsort(u, kind="stable")


def batches(samples, cfg: TrainConfig, stage: str, epoch: int):
    order = batch_order(len(samples), cfg.seed, stage, epoch)
    for i in range(0, len(order), cfg.batch_size):
        yield [samples[j] for j in order[i : i + cfg.batch_size]]


def stage_steps(n_samples: int, cfg: TrainConfig, epochs: int) -> int:
    return epochs * math.ceil(n_samples / cfg.batch_size)


def learning_rate_at(cfg: TrainConfig, step: int, total: int | None) -> float:
    if not cfg.lr_decay or not total:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


def apply_update(params: dict[str, Tensor], state: AdamState, cfg: TrainConfig, total_steps: int | None = None) -> float:
    grads = {k: v.grad for k, v in params.items()}
    norm = ad.clip_grad_norm(grads, cfg.grad_clip) if cfg.grad_clip > 0 else math.nan
    ad.adam_step(params, grads, state, learning_rate_at(cfg, state.step, total_steps))
    ad.zero_grads(params.values())
    return norm


def fresh_model(seed: int, encoder: dict[str, Tensor] | None) -> M.VLAModel:
    """Fresh decoder, with the encoder replaced by a copy of ``encoder`` when given."""
    net = M.VLAModel.create(seed)
    if encoder is not None:
        for k, v in encoder.items():
            net.params[k] = Tensor(np.array(v.data, dtype=np.float32, copy=True), True, k)
    return net


# --------------------------------------------------------------------------
# encoder pretraining


def init_pretrain_head(seed: int) -> dict[str, Tensor]:
    s = RngStream("pretrain-head", seed)
    return {
        "pretrain.mask": Tensor((0.02 * s.child("mask").normal((M.D_MODEL,))).astype(np.float32), True),
        "pretrain.head.w": Tensor((0.02 * s.child("w").normal((M.D_MODEL, M.PATCH * M.PATCH))).astype(np.float32), True),
        "pretrain.head.b": Tensor(np.zeros(M.PATCH * M.PATCH, np.float32), True),
    }


def patch_mask(n: int, stream: RngStream) -> np.ndarray:
    """(n, 48) boolean masks with exactly 25% of tokens set per row."""
    k = int(round(MASK_RATIO * M.N_VISUAL))
    order = np.argsort(stream.uniform((n, M.N_VISUAL)), axis=1, kind="stable")
    m = np.zeros((n, M.N_VISUAL), dtype=bool)
    np.put_along_axis(m, order[:, :k], True, axis=1)
    return m


def masked_reconstruction(params: dict[str, Tensor], views: np.ndarray, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Reconstruction MSE over masked patches, and the raw patch targets."""
    patches = M.patchify(views)
    x = M.linear(params, "encoder.patch", Tensor(patches))
    m = Tensor(mask[..., None].astype(np.float32))
    keep = Tensor(1.0 - mask[..., None].astype(np.float32))
    x = ad.add(ad.mul(x, keep), ad.mul(m, params["pretrain.mask"]))
    view_ids = np.repeat(np.arange(len(views[0])), M.PATCHES_PER_VIEW)
    pos_ids = np.tile(np.arange(M.PATCHES_PER_VIEW), len(views[0]))
    x = ad.add(x, ad.add(ad.embedding_lookup(params["encoder.pos"], pos_ids), ad.embedding_lookup(params["encoder.view"], view_ids)))
    for i in range(M.ENC_BLOCKS):
        x = M.block_forward(params, f"encoder.block{i}", x, None)
    x = ad.layer_norm(x, params["encoder.ln_f.g"], params["encoder.ln_f.b"])
    rec = M.linear(params, "pretrain.head", x)
    # per-patch squared error, counted on masked tokens only
    w = mask.astype(np.float32) * (mask.size / mask.sum())
    return ad.mse(rec, Tensor(patches), w), patches


@dataclass
class PretrainResult:
    encoder: dict[str, Tensor]
    history: list[float]
    initial: float
    best: float
    reached_target: bool
    baseline_mean: float


def pretrain_eval(params, samples, seed: int) -> float:
    views = np.stack([s.views for s in samples])
    mask = patch_mask(len(samples), RngStream("pretrain-eval", seed))
    with ad.no_grad():
        loss, _ = masked_reconstruction(params, views, mask)
    return loss.item()


def mean_patch_baseline(train, held, seed: int) -> float:
    """Masked-patch MSE of always predicting the training-set mean patch."""
    mean_patch = M.patchify(np.stack([s.views for s in train])).reshape(-1, M.PATCH * M.PATCH).mean(axis=0)
    p = M.patchify(np.stack([s.views for s in held]))
    mask = patch_mask(len(held), RngStream("pretrain-eval", seed))
    err = ((p - mean_patch) ** 2).sum(axis=-1)
    return float(err[mask].mean())


def pretrain_encoder(train, cfg: TrainConfig, held=None) -> PretrainResult:
    """Masked-patch reconstruction over the epoch budget.

    Returns the encoder from the best held-out epoch; ``reached_target`` says
    whether held-out error fell below half its initial value.
    """
    held = held if held else train[: min(len(train), 64)]
    base = M.VLAModel.create(cfg.seed)
    params = {**base.encoder_params(), **init_pretrain_head(cfg.seed)}
    state = AdamState()
    initial = pretrain_eval(params, held, cfg.seed)
    best, best_params = initial, {k: v.data.copy() for k, v in params.items()}
    history = []
    total = stage_steps(len(train), cfg, cfg.pretrain_epochs)
    for epoch in range(cfg.pretrain_epochs):
        for step, chunk in enumerate(batches(train, cfg, "pretrain", epoch)):
            views = np.stack([s.views for s in chunk])
            mask = patch_mask(len(chunk), RngStream("pretrain-mask", cfg.seed).child(epoch, step))
            with ad.Tape():
                loss, _ = masked_reconstruction(params, views, mask)
                ad.backward(loss)
            apply_update(params, state, cfg, total)
        val = pretrain_eval(params, held, cfg.seed)
        history.append(val)
        if val < best:
            best, best_params = val, {k: v.data.copy() for k, v in params.items()}
    encoder = {k: Tensor(v, False, k) for k, v in best_params.items() if k.startswith("encoder.")}
    return PretrainResult(encoder, history, initial, best, best < 0.5 * initial, mean_patch_baseline(train, held, cfg.seed))


# --------------------------------------------------------------------------
# oracle teacher


def teacher_step(
    teacher: M.VLAModel, chunk, mode: str, state: AdamState, cfg: TrainConfig, stream: RngStream, total_steps: int | None = None
) -> float:
    b = M.Batch.from_samples(chunk)
    coarse = None
    if mode == O.FINE:
        coarse, _ = M.generate(teacher, b, future=True)
    with ad.Tape():
        out = M.forward_teacher_forced(
            teacher, b, dropout_p=cfg.train_dropout, stream=stream, future=True, coarse_tokens=coarse
        )
        loss = M.nll_loss(out, b.targets)
        ad.backward(loss)
    apply_update(teacher.params, state, cfg, total_steps)
    teacher.sft_steps += 1
    return loss.item()


def teacher_nll(teacher: M.VLAModel, samples, refine: bool = False) -> float:
    """Mean teacher-forced coarse (or refined) NLL over ``samples``."""
    vals = []
    for i in range(0, len(samples), 16):
        b = M.Batch.from_samples(samples[i : i + 16])
        coarse = M.generate(teacher, b, future=True)[0] if refine else None
        with ad.no_grad():
            out = M.forward_teacher_forced(teacher, b, future=True, coarse_tokens=coarse)
        vals.append(M.nll_loss(out, b.targets).item() * len(b))
    return math.fsum(vals) / len(samples)


def train_teacher(train, cfg: TrainConfig, encoder: dict[str, Tensor] | None, val=None, threads: int = 1):
    """Oracle teacher: each batch trains the coarse objective with probability
    ``coarse_fine_mix``, otherwise the refinement objective on its own greedy
    coarse prediction."""
    if any(s.future_views is None for s in train[:1]):
        raise ValueError("teacher training needs samples with future observations")
    teacher = fresh_model(cfg.seed + 1, encoder)
    state = AdamState()
    report = TrainReport("teacher", counters={"coarse": 0, "fine": 0})
    total = stage_steps(len(train), cfg, cfg.teacher_epochs)
    for epoch in range(cfg.teacher_epochs):
        t0 = time.perf_counter()
        losses = []
        for step, chunk in enumerate(batches(train, cfg, "teacher", epoch)):
            s = RngStream("teacher", cfg.seed).child(epoch, step)
            mode = O.COARSE if s.child("mode").uniform((1,))[0] < cfg.coarse_fine_mix else O.FINE
            report.counters[mode] += 1
            loss = teacher_step(teacher, chunk, mode, state, cfg, s.child("dropout"), total)
            losses.append(loss)
            report.steps.append(StepLog(loss, loss))
        mean = math.fsum(losses) / len(losses)
        rec = EpochRecord(epoch, mean, mean, 0.0, 0.0, 0.0)
        if val:
            rec = _attach_eval(rec, E.eval_open_loop(teacher, val, "teacher", threads=threads))
        rec.wall_clock = time.perf_counter() - t0
        report.epochs.append(rec)
    return teacher.freeze(), report


# --------------------------------------------------------------------------
# student distillation


@dataclass
class StudentContext:
    student: M.VLAModel
    anchorformer: dict[str, Tensor]
    anchor: A.SelfAnchorTeacher | None
    embed_params: dict[str, Tensor] | None
    cfg: TrainConfig

    def trainable(self) -> dict[str, Tensor]:
        p = dict(self.student.params)
        if self.uses_visual_kd:
            p.update(self.anchorformer)
        return p

    @property
    def uses_traj_kd(self) -> bool:
        return self.cfg.traj_kd and (self.cfg.lambda_h > 0 or self.cfg.lambda_l > 0)

    @property
    def uses_visual_kd(self) -> bool:
        return self.cfg.visual_kd and self.cfg.lambda_a > 0


def make_student_context(cfg: TrainConfig, encoder, teacher: M.VLAModel | None) -> StudentContext:
    student = fresh_model(cfg.seed + 2, encoder)
    anchor = A.make_self_anchor_teacher(student)
    af = A.init_anchorformer(student.params, cfg.seed)
    embed = teacher.params if teacher is not None else {k: Tensor(v.data.copy()) for k, v in student.params.items()}
    return StudentContext(student, af, anchor, embed, cfg)


def student_losses(ctx: StudentContext, b: M.Batch, targets: list[O.Target] | None, stream: RngStream | None):
    """Composite loss terms for one batch; call inside a tape to train."""
    cfg = ctx.cfg
    p = ctx.student.params
    z_stu = M.encode_views(b.views, p)
    out = M.forward_teacher_forced(ctx.student, b, dropout_p=cfg.train_dropout, stream=stream, visual=z_stu)
    nll = M.nll_loss(out, b.targets)
    total = nll
    terms = {"l_a": None, "l_h": None, "l_l": None}
    if ctx.uses_traj_kd:
        if targets is None:
            raise ValueError("trajectory distillation needs teacher targets")
        h_t = Tensor(np.stack([t.hidden for t in targets]))
        l_t = Tensor(np.stack([t.logits for t in targets]))
        if cfg.lambda_h > 0:
            terms["l_h"] = ad.mse(out.hidden, h_t)
            total = ad.add(total, ad.scale(terms["l_h"], cfg.lambda_h))
        if cfg.lambda_l > 0:
            terms["l_l"] = ad.kl_div(l_t, out.logits, cfg.tau_t)
            total = ad.add(total, ad.scale(terms["l_l"], cfg.lambda_l))
    if ctx.uses_visual_kd:
        z_tea = ctx.anchor.encode(b.views)
        w = A.anchor_forward(z_tea, *A.anchor_context(ctx.embed_params, b), ctx.anchorformer, cfg.tau_v)
        terms["l_a"] = A.visual_distill_loss(z_tea, z_stu, w)
        total = ad.add(total, ad.scale(terms["l_a"], cfg.lambda_a))
    return total, nll, terms, out


def student_step(
    ctx: StudentContext, chunk, targets, state: AdamState, stream: RngStream | None, total_steps: int | None = None
) -> StepLog:
    b = M.Batch.from_samples(chunk)
    with ad.Tape():
        total, nll, terms, _ = student_losses(ctx, b, targets, stream)
        ad.backward(total)
    apply_update(ctx.trainable(), state, ctx.cfg, total_steps)
    ctx.student.sft_steps += 1
    val = {k: (v.item() if v is not None else 0.0) for k, v in terms.items()}
    return StepLog(total.item(), nll.item(), **val)


def train_student(
    train,
    cfg: TrainConfig,
    encoder: dict[str, Tensor] | None,
    teacher: M.VLAModel | None = None,
    val=None,
    threads: int = 1,
    base: dict[str, O.CandidateSet] | None = None,
):
    """Student with L + lambda_a L_a + lambda_h L_h + lambda_l L_l.

    Teacher and self-anchor parameters are checked for bitwise stability
    after every epoch. ``base`` may carry the teacher's greedy candidates;
    MC-Dropout is redrawn each epoch unless ``cache_targets`` is set.
    """
    ctx = make_student_context(cfg, encoder, teacher)
    if ctx.uses_traj_kd and teacher is None:
        raise ValueError("trajectory distillation needs a teacher")
    teacher_digest = teacher.fingerprint() if teacher is not None else None
    if ctx.uses_traj_kd and base is None:
        base = O.base_candidates_all(teacher, train, cfg.traj_refine, threads=threads)
    state = AdamState()
    report = TrainReport("student", counters={"steps": 0})
    provenance: dict[str, int] = {}
    frozen_targets = None
    total = stage_steps(len(train), cfg, cfg.epochs)
    best: tuple[float, int, dict[str, np.ndarray]] | None = None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        targets = None
        if ctx.uses_traj_kd:
            if frozen_targets is None or not cfg.cache_targets:
                tl = O.distill_targets(teacher, train, cfg, epoch, base, threads)
                frozen_targets = {t.sample_id: t for t in tl}
            targets = frozen_targets
            for t in targets.values():
                key = t.provenance.split(":")[0] if t.provenance.startswith("sample") else t.provenance
                provenance[key] = provenance.get(key, 0) + 1
        logs = []
        for step, chunk in enumerate(batches(train, cfg, "student", epoch)):
            tg = [targets[s.sample_id] for s in chunk] if targets is not None else None
            stream = RngStream("student-dropout", cfg.seed).child(epoch, step)
            logs.append(student_step(ctx, chunk, tg, state, stream, total))
        report.steps.extend(logs)
        report.counters["steps"] += len(logs)

        def avg(attr):
            return math.fsum(getattr(g, attr) for g in logs) / len(logs)

        rec = EpochRecord(epoch, avg("total"), avg("nll"), avg("l_a"), avg("l_h"), avg("l_l"))
        if val:
            rec = _attach_eval(rec, E.eval_open_loop(ctx.student, val, "student", threads=threads))
        check_frozen(ctx, teacher, teacher_digest)
        if val and cfg.keep_best and (best is None or rec.val_l2_avg < best[0]):
            best = (rec.val_l2_avg, epoch, {k: v.data.copy() for k, v in ctx.student.params.items()})
        rec.wall_clock = time.perf_counter() - t0
        report.epochs.append(rec)
    if best is not None:
        for k, v in ctx.student.params.items():
            v.data[...] = best[2][k]
        report.counters["best_epoch"] = best[1]
    report.counters.update({f"provenance_{k}": v for k, v in provenance.items()})
    return ctx, report


def check_frozen(ctx: StudentContext, teacher: M.VLAModel | None, digest: str | None) -> None:
    if ctx.anchor is not None:
        try:
            ctx.anchor.check_frozen()
        except A.AnchorError as e:
            raise FrozenParameterError(str(e)) from None
    if teacher is not None and teacher.fingerprint() != digest:
        raise FrozenParameterError("oracle teacher parameters changed during student training")


# --------------------------------------------------------------------------
# ablation


ABLATION_ROWS = (
    ("baseline", dict(traj_kd=False, traj_refine=False, mc_dropout=False, visual_kd=False)),
    ("traj_kd", dict(traj_kd=True, traj_refine=False, mc_dropout=False, visual_kd=False)),
    ("traj_refine", dict(traj_kd=True, traj_refine=True, mc_dropout=False, visual_kd=False)),
    ("mc_dropout", dict(traj_kd=True, traj_refine=True, mc_dropout=True, visual_kd=False)),
    ("visual_kd", dict(traj_kd=True, traj_refine=True, mc_dropout=True, visual_kd=True)),
)
ABLATION_HEADER = "row,traj_kd,traj_refine,mc_dropout,visual_kd,l2_1s,l2_2s,l2_3s,l2_avg,col_1s,col_2s,col_3s,col_avg"


@dataclass
class AblationRow:
    name: str
    toggles: dict
    report: E.EvalReport
    train_report: TrainReport
    seconds: float = 0.0


def run_ablation(
    ds, cfg: TrainConfig, encoder, teacher: M.VLAModel, threads: int = 1, rows=ABLATION_ROWS
) -> list[AblationRow]:
    """Cumulative component rows, trained with shared seeds, selected on val and evaluated on test."""
    bases = {}
    out = []
    for name, toggles in rows:
        t0 = time.perf_counter()
        c = cfg.with_overrides(**toggles)
        base = None
        if c.traj_kd:
            if c.traj_refine not in bases:
                bases[c.traj_refine] = O.base_candidates_all(teacher, ds.train, c.traj_refine, threads=threads)
            base = bases[c.traj_refine]
        ctx, rep = train_student(ds.train, c, encoder, teacher, val=ds.val, threads=threads, base=base)
        ev = E.eval_open_loop(ctx.student, ds.test, "student", tag=name, threads=threads)
        out.append(AblationRow(name, toggles, ev, rep, time.perf_counter() - t0))
    return out


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER.split(","))
    for r in rows:
        t = r.toggles
        flags = ["x" if t[k] else "" for k in ("traj_kd", "traj_refine", "mc_dropout", "visual_kd")]
        w.writerow([r.name] + flags + r.report.row()[1:-1])
    return buf.getvalue()
