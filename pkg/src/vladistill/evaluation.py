"""Open-loop metrics and teacher loss-distribution analyses, emitted as CSV.

Schemas::

    eval_report.csv         model_tag,l2_1s,l2_2s,l2_3s,l2_avg,col_1s,col_2s,col_3s,col_avg,n
    loss_dist.csv           tag,sample_id,ce
    loss_dist_summary.csv   tag,min,q1,median,q3,max,mean,frac_below_0p1

Horizons 1/2/3 s are waypoint indices 2/4/6. By default the L2 of a
horizon is the error at that waypoint; ``cumulative=True`` averages the
per-step errors up to the horizon instead. Either way the averages are the
mean of the three horizon values. Sums use ``math.fsum`` so results do not
depend on sample order.
"""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import model as M
from . import oracle as O
from . import scenario as sc
from .config import TrainConfig
from .parallel import ordered_map

HORIZONS = ("1s", "2s", "3s")
EVAL_HEADER = "model_tag,l2_1s,l2_2s,l2_3s,l2_avg,col_1s,col_2s,col_3s,col_avg,n"
DIST_HEADER = "tag,sample_id,ce"
SUMMARY_HEADER = "tag,min,q1,median,q3,max,mean,frac_below_0p1"
HIST_EDGES = np.round(np.arange(0.0, 5.0 + 1e-9, 0.1), 10)


@dataclass
class EvalReport:
    model_tag: str
    l2_1s: float
    l2_2s: float
    l2_3s: float
    l2_avg: float
    col_1s: float
    col_2s: float
    col_3s: float
    col_avg: float
    n: int

    def row(self) -> list:
        return [self.model_tag] + [repr(float(getattr(self, f.name))) for f in fields(self)[1:-1]] + [str(self.n)]


@lru_cache(maxsize=4096)
def scene_for(seed: int) -> sc.Scene:
    return sc.sample_scene(seed)


def _mean(xs) -> float:
    xs = list(xs)
    return math.fsum(xs) / len(xs)


def evaluate_predictions(pred: np.ndarray, samples, tag: str, cumulative: bool = False) -> EvalReport:
    """Metrics for predicted ego-frame waypoints ``pred`` of shape (n, T, 2)."""
    if not len(samples):
        raise ValueError("cannot evaluate an empty shard")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.stack([s.waypoints for s in samples]).astype(np.float64)
    err = np.linalg.norm(pred - gt, axis=-1)  # (n, T)
    l2, col = {}, {}
    for h in HORIZONS:
        k = sc.HORIZON_STEPS[h]
        per = err[:, :k].mean(axis=1) if cumulative else err[:, k - 1]
        l2[h] = _mean(per)
        col[h] = _mean(
            sc.collision_check(p, scene_for(s.scene_seed), s.t_index, k)[1] for p, s in zip(pred, samples)
        )
    return EvalReport(
        tag,
        l2["1s"],
        l2["2s"],
        l2["3s"],
        math.fsum(l2.values()) / 3,
        col["1s"],
        col["2s"],
        col["3s"],
        math.fsum(col.values()) / 3,
        len(samples),
    )


def predict(model: M.VLAModel, samples, mode: str = "student", chunk: int = 16, threads: int = 1) -> np.ndarray:
    """Greedy waypoints; the teacher predicts coarse then refines."""
    if mode not in ("student", "teacher"):
        raise ValueError(f"unknown mode {mode!r}")
    chunks = [samples[i : i + chunk] for i in range(0, len(samples), chunk)]

    def run(c):
        b = M.Batch.from_samples(c)
        if mode == "student":
            tok, _ = M.generate(model, b)
        else:
            ctok, _ = O.coarse_predict(model, b)
            tok, _ = O.refine_predict(model, b, ctok)
        return np.stack([M.tokens_to_waypoints(t) for t in tok])

    return np.concatenate(list(ordered_map(run, chunks, threads)))


def eval_open_loop(
    model: M.VLAModel, samples, mode: str = "student", tag: str | None = None, threads: int = 1, cumulative: bool = False
) -> EvalReport:
    if not len(samples):
        raise ValueError("cannot evaluate an empty shard")
    pred = predict(model, samples, mode, threads=threads)
    return evaluate_predictions(pred, samples, tag or mode, cumulative)


# --------------------------------------------------------------------------
# loss distributions


@dataclass
class LossDistribution:
    tag: str
    sample_ids: list[str]
    losses: np.ndarray

    def __post_init__(self) -> None:
        self.losses = np.asarray(self.losses, dtype=np.float64)

    def summary(self) -> dict[str, float]:
        x = self.losses
        q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75])
        return {
            "min": float(x.min()),
            "q1": float(q1),
            "median": float(med),
            "q3": float(q3),
            "max": float(x.max()),
            "mean": _mean(x),
            "frac_below_0p1": float(np.mean(x < 0.1)),
        }

    def histogram(self) -> np.ndarray:
        """Counts over [0, 5] in 0.1 steps; out-of-range losses land in the end bins."""
        x = np.clip(self.losses, HIST_EDGES[0], HIST_EDGES[-1])
        counts, _ = np.histogram(x, bins=HIST_EDGES)
        return counts


def compare_refinement(teacher: M.VLAModel, samples, threads: int = 1) -> tuple[LossDistribution, LossDistribution, float]:
    """Per-sample CE of coarse and refined predictions, plus the median shift (post - pre)."""
    base = O.base_candidates_all(teacher, samples, refine=True, threads=threads)
    ids = [s.sample_id for s in samples]
    ce = [O.candidate_losses(base[s.sample_id], M.trajectory_tokens(s.waypoints)) for s in samples]
    pre = LossDistribution("pre_refine", ids, [c[0] for c in ce])
    post = LossDistribution("post_refine", ids, [c[1] for c in ce])
    return pre, post, post.summary()["median"] - pre.summary()["median"]


def compare_mc_dropout(
    teacher: M.VLAModel, samples, cfg: TrainConfig, threads: int = 1, epoch: int = 0
) -> tuple[LossDistribution, LossDistribution, list]:
    """Best CE over {coarse, fine} against best over the enlarged set.

    Also returns the candidate audit rows (sample_id, provenance, ce).
    """
    base = O.base_candidates_all(teacher, samples, refine=True, threads=threads)
    ids = [s.sample_id for s in samples]

    def one(s):
        tg = M.trajectory_tokens(s.waypoints)
        cs = base[s.sample_id]
        before = float(O.candidate_losses(cs, tg).min())
        full = O.mc_dropout_sample(cs, cfg.dropout_p, cfg.mc_samples, teacher, O.mc_stream(cfg, epoch))
        _, _, after = O.select_optimal(full, tg)
        return before, after, O.audit_rows(full, tg)

    res = list(ordered_map(one, samples, threads))
    audit = [r for _, _, rows in res for r in rows]
    return (
        LossDistribution("before_mc", ids, [r[0] for r in res]),
        LossDistribution("after_mc", ids, [r[1] for r in res]),
        audit,
    )


# --------------------------------------------------------------------------
# CSV emission


def _atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)
    return path


def _csv(header: str, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header.split(","))
    w.writerows(rows)
    return buf.getvalue()


def emit_report(reports, path) -> Path:
    """Write EvalReports to ``eval_report.csv`` layout."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    return _atomic_write(path, _csv(EVAL_HEADER, [r.row() for r in reports]))


def read_report(path) -> list[EvalReport]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        if ",".join(next(r)) != EVAL_HEADER:
            raise ValueError(f"{path}: unexpected header")
        return [EvalReport(row[0], *map(float, row[1:-1]), int(row[-1])) for row in r]


def emit_distributions(dists, path) -> Path:
    rows = [[d.tag, sid, repr(float(v))] for d in dists for sid, v in zip(d.sample_ids, d.losses)]
    return _atomic_write(path, _csv(DIST_HEADER, rows))


def emit_summaries(dists, path) -> Path:
    rows = []
    for d in dists:
        s = d.summary()
        rows.append([d.tag] + [repr(s[k]) for k in SUMMARY_HEADER.split(",")[1:]])
    return _atomic_write(path, _csv(SUMMARY_HEADER, rows))


def read_distributions(path) -> list[LossDistribution]:
    out: dict[str, tuple[list, list]] = {}
    with open(path, newline="") as f:
        r = csv.reader(f)
        if ",".join(next(r)) != DIST_HEADER:
            raise ValueError(f"{path}: unexpected header")
        for tag, sid, ce in r:
            ids, vals = out.setdefault(tag, ([], []))
            ids.append(sid)
            vals.append(float(ce))
    return [LossDistribution(t, ids, vals) for t, (ids, vals) in out.items()]


def report_dict(r: EvalReport) -> dict:
    return asdict(r)
