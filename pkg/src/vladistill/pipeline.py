"""File-level pipeline stages shared by the CLI and the experiment scripts.

Each stage reads its declared inputs, writes its outputs atomically and
leaves a run manifest (``run_<stage>.json``) beside them.
"""
from __future__ import annotations

import hashlib
import json
import os
import platform
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as E
from . import model as M
from . import scenario as sc
from . import trainer as T
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, dump_config


def file_digest(path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)
    return path


def _digests(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for q in sorted(p.iterdir()):
                if q.is_file() and q.suffix in (".jsonl", ".json") and not q.name.startswith("run_"):
                    out[str(q)] = file_digest(q)
        elif p.exists():
            out[str(p)] = file_digest(p)
    return out


def write_manifest(out_dir, stage: str, cfg: TrainConfig, inputs=(), outputs=(), extra: dict | None = None) -> Path:
    manifest = {
        "stage": stage,
        "config_hash": cfg.digest(),
        "config": asdict(cfg),
        "seed": cfg.seed,
        "versions": {
            "vladistill": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "scenes": sc.GENERATOR_VERSION,
        },
        "inputs": _digests(inputs),
        "outputs": _digests(outputs),
    }
    if extra:
        manifest.update(extra)
    return write_text(Path(out_dir) / f"run_{stage}.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# stages


def gen(out_dir, n_scenes: int, seed: int, split_ratio=(0.8, 0.1, 0.1), threads: int = 1) -> sc.Dataset:
    ds = sc.build_dataset(n_scenes, seed, split_ratio, threads)
    sc.write_shards(ds, out_dir, n_scenes, seed, split_ratio)
    return ds


def model_from_checkpoint(path, prefixes=("encoder.", "decoder.")) -> M.VLAModel:
    ck = load_checkpoint(path)
    return M.VLAModel({k: Tensor(v.copy(), False, k) for k, v in ck.params.items() if k.startswith(prefixes)})


def encoder_from_checkpoint(path) -> dict[str, Tensor]:
    ck = load_checkpoint(path)
    return {k: Tensor(v.copy(), False, k) for k, v in ck.params.items() if k.startswith("encoder.")}


def pretrain(ds: sc.Dataset, cfg: TrainConfig, out_dir) -> T.PretrainResult:
    out = Path(out_dir)
    res = T.pretrain_encoder(ds.train, cfg, ds.val)
    save_checkpoint(out / "encoder.ckpt", res.encoder, None, cfg.digest(), {"stage": "pretrain"})
    rows = "".join(f"{i},{v!r}\n" for i, v in enumerate(res.history))
    write_text(out / "pretrain_history.csv", "epoch,recon_mse\n" + rows)
    return res


def train_teacher(ds: sc.Dataset, cfg: TrainConfig, encoder, out_dir, threads: int = 1):
    out = Path(out_dir)
    teacher, rep = T.train_teacher(ds.train, cfg, encoder, ds.val, threads)
    save_checkpoint(out / "teacher.ckpt", teacher.params, None, cfg.digest(), {"stage": "teacher"})
    write_text(out / "teacher_report.csv", rep.to_csv())
    write_text(out / "teacher_timing.csv", rep.timing_csv())
    return teacher, rep


def train_student(ds: sc.Dataset, cfg: TrainConfig, encoder, teacher, out_dir, threads: int = 1):
    out = Path(out_dir)
    ctx, rep = T.train_student(ds.train, cfg, encoder, teacher, ds.val, threads)
    params = {**ctx.student.params, **ctx.anchorformer}
    save_checkpoint(out / "student.ckpt", params, None, cfg.digest(), {"stage": "student"})
    write_text(out / "student_report.csv", rep.to_csv())
    write_text(out / "student_timing.csv", rep.timing_csv())
    return ctx, rep


def evaluate(model: M.VLAModel, samples, mode: str, tag: str, out_path, threads: int = 1, cumulative: bool = False):
    rep = E.eval_open_loop(model, samples, mode, tag, threads, cumulative)
    E.emit_report(rep, out_path)
    return rep


def analyze(teacher: M.VLAModel, samples, cfg: TrainConfig, out_dir, threads: int = 1) -> dict:
    """Refinement and MC-Dropout loss distributions for a trained teacher."""
    from . import oracle as O

    out = Path(out_dir)
    pre, post, shift = E.compare_refinement(teacher, samples, threads)
    before, after, audit = E.compare_mc_dropout(teacher, samples, cfg, threads)
    dists = [pre, post, before, after]
    E.emit_distributions(dists, out / "loss_dist.csv")
    E.emit_summaries(dists, out / "loss_dist_summary.csv")
    O.write_audit(out / "candidate_audit.csv", audit)
    stats = {
        "median_pre_refine": pre.summary()["median"],
        "median_post_refine": post.summary()["median"],
        "median_shift_refine": shift,
        "mean_before_mc": before.summary()["mean"],
        "mean_after_mc": after.summary()["mean"],
        "frac_below_0p1_before": before.summary()["frac_below_0p1"],
        "frac_below_0p1_after": after.summary()["frac_below_0p1"],
    }
    write_text(out / "analysis.json", json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return stats


def ablate(ds: sc.Dataset, cfg: TrainConfig, encoder, teacher, out_dir, threads: int = 1):
    out = Path(out_dir)
    rows = T.run_ablation(ds, cfg, encoder, teacher, threads)
    write_text(out / "ablation.csv", T.ablation_csv(rows))
    for r in rows:
        write_text(out / f"ablation_{r.name}_report.csv", r.train_report.to_csv())
    return rows


def full_run(cfg: TrainConfig, out_dir, threads: int = 1) -> dict:
    """gen -> pretrain -> teacher -> student -> eval, each with its manifest."""
    out = Path(out_dir)
    data = out / "data"
    ds = gen(data, cfg.n_scenes, cfg.data_seed, threads=threads)
    write_manifest(data, "gen", cfg, outputs=[data])
    pretrain(ds, cfg, out)
    write_manifest(out, "pretrain", cfg, [data], [out / "encoder.ckpt", out / "pretrain_history.csv"])
    encoder = encoder_from_checkpoint(out / "encoder.ckpt")
    teacher, _ = train_teacher(ds, cfg, encoder, out, threads)
    write_manifest(out, "train-teacher", cfg, [data, out / "encoder.ckpt"], [out / "teacher.ckpt", out / "teacher_report.csv"])
    ctx, _ = train_student(ds, cfg, encoder, teacher, out, threads)
    write_manifest(
        out, "train-student", cfg, [data, out / "encoder.ckpt", out / "teacher.ckpt"], [out / "student.ckpt", out / "student_report.csv"]
    )
    student_rep = E.eval_open_loop(ctx.student, ds.test, "student", "student", threads)
    teacher_rep = E.eval_open_loop(teacher, ds.test, "teacher", "teacher", threads)
    E.emit_report([student_rep, teacher_rep], out / "eval_report.csv")
    write_manifest(out, "eval", cfg, [data, out / "student.ckpt", out / "teacher.ckpt"], [out / "eval_report.csv"])
    return {"student": student_rep, "teacher": teacher_rep, "config": dump_config(cfg)}


def source_digest() -> str:
    """Digest of the package sources; cached experiment results are keyed on it."""
    h = hashlib.blake2b(digest_size=16)
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def seed_experiment(cfg: TrainConfig, out_dir, threads: int = 1) -> dict:
    """Pretrain, teacher, teacher analyses and the ablation table for one seed.

    Writes every artifact under ``out_dir`` and returns (and stores as
    ``summary.json``) the numbers the acceptance checks read.
    """
    import time

    out = Path(out_dir)
    digest = source_digest()  # taken up front so later edits cannot be attributed to this run
    clock = {}
    t = time.perf_counter()
    ds = sc.build_dataset(cfg.n_scenes, cfg.data_seed, threads=threads)
    clock["gen"] = time.perf_counter() - t

    t = time.perf_counter()
    res = pretrain(ds, cfg, out)
    clock["pretrain"] = time.perf_counter() - t

    t = time.perf_counter()
    teacher, _ = train_teacher(ds, cfg, res.encoder, out, threads)
    clock["teacher"] = time.perf_counter() - t
    initial_nll = T.teacher_nll(T.fresh_model(cfg.seed + 1, res.encoder), ds.val)
    final_nll = T.teacher_nll(teacher, ds.val)

    t = time.perf_counter()
    teacher_rep = E.eval_open_loop(teacher, ds.test, "teacher", "teacher", threads)
    stats = analyze(teacher, ds.test, cfg, out / "analysis", threads)
    clock["teacher_eval_analysis"] = time.perf_counter() - t

    rows = ablate(ds, cfg, res.encoder, teacher, out, threads)
    for r in rows:
        clock[f"student_{r.name}"] = r.seconds
    E.emit_report([r.report for r in rows] + [teacher_rep], out / "eval_report.csv")

    summary = {
        "config_hash": cfg.digest(),
        "source_digest": digest,
        "seed": cfg.seed,
        "pretrain": {"initial": res.initial, "best": res.best, "baseline_mean": res.baseline_mean, "history": res.history},
        "teacher_val_nll": {"initial": initial_nll, "final": final_nll},
        "teacher": asdict(teacher_rep),
        "analysis": stats,
        "ablation": {r.name: asdict(r.report) for r in rows},
        "seconds": clock,
    }
    write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "seed-experiment", cfg, outputs=[out / "summary.json", out / "ablation.csv"])
    return summary
