"""Future-aware oracle teacher: candidate trajectories and distillation targets.

Per sample the teacher decodes a coarse trajectory from current and future
observations, refines it with the coarse tokens attached, optionally widens
the pool by MC-Dropout on the final trajectory hidden states, and hands the
candidate with the lowest cross-entropy against ground truth to the student.
"""
from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import RngStream, Tensor
from .config import TrainConfig
from .parallel import ordered_map

COARSE = "coarse"
FINE = "fine"


class CandidateError(RuntimeError):
    pass


@dataclass
class Candidate:
    hidden: np.ndarray  # (2T, D)
    logits: np.ndarray  # (2T, V)
    provenance: str

    @property
    def source(self) -> str:
        return self.provenance.split(":")[1] if self.provenance.startswith("sample:") else self.provenance


@dataclass
class CandidateSet:
    """Index-aligned hidden states and logits for one sample."""

    sample_id: str
    entries: list[Candidate] = field(default_factory=list)
    sampled: bool = False

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def hiddens(self) -> list[np.ndarray]:
        return [c.hidden for c in self.entries]

    @property
    def logits(self) -> list[np.ndarray]:
        return [c.logits for c in self.entries]

    def add(self, cand: Candidate) -> None:
        if any(c.provenance == cand.provenance for c in self.entries):
            raise CandidateError(f"duplicate provenance {cand.provenance}")
        self.entries.append(cand)

    def copy(self) -> "CandidateSet":
        return CandidateSet(self.sample_id, list(self.entries), self.sampled)


@dataclass
class Target:
    sample_id: str
    hidden: np.ndarray
    logits: np.ndarray
    provenance: str
    ce: float
    index: int


# --------------------------------------------------------------------------
# greedy coarse and refined trajectories


def _check_future(batch: M.Batch) -> None:
    if batch.future_views is None or batch.future_ego is None:
        raise ValueError("oracle teacher needs future observations")


def coarse_predict(teacher: M.VLAModel, batch: M.Batch) -> tuple[np.ndarray, M.ForwardOutput]:
    _check_future(batch)
    return M.generate(teacher, batch, future=True)


def refine_predict(teacher: M.VLAModel, batch: M.Batch, coarse_tokens: np.ndarray) -> tuple[np.ndarray, M.ForwardOutput]:
    _check_future(batch)
    ct = np.asarray(coarse_tokens)
    if ct.shape != (len(batch), M.N_TRAJ):
        raise ValueError(f"coarse trajectory must be ({len(batch)}, {M.N_TRAJ}) tokens, got {ct.shape}")
    return M.generate(teacher, batch, future=True, coarse_tokens=ct)


def _reprojected(teacher: M.VLAModel, hidden: np.ndarray, provenance: str) -> Candidate:
    h = hidden.copy()
    return Candidate(h, M.lm_head_np(teacher.params, h), provenance)


def base_candidates(teacher: M.VLAModel, samples, refine: bool = True) -> list[CandidateSet]:
    """Coarse (and refined) candidates for a list of samples.

    Logits are re-projected per sample so every entry, sampled or not, comes
    from the same matmul shape and compares exactly.
    """
    batch = M.Batch.from_samples(samples)
    ctok, cout = coarse_predict(teacher, batch)
    sets = [CandidateSet(s.sample_id) for s in samples]
    for i, cs in enumerate(sets):
        cs.add(_reprojected(teacher, cout.hidden.data[i], COARSE))
    if refine:
        _, fout = refine_predict(teacher, batch, ctok)
        for i, cs in enumerate(sets):
            cs.add(_reprojected(teacher, fout.hidden.data[i], FINE))
    return sets


def base_candidates_all(teacher: M.VLAModel, samples, refine: bool = True, chunk: int = 16, threads: int = 1):
    """``base_candidates`` over many samples, chunked; keyed by sample id."""
    chunks = [samples[i : i + chunk] for i in range(0, len(samples), chunk)]
    out: dict[str, CandidateSet] = {}
    for sets in ordered_map(lambda c: base_candidates(teacher, c, refine), chunks, threads):
        for cs in sets:
            out[cs.sample_id] = cs
    return out


# --------------------------------------------------------------------------
# MC-Dropout


def mc_dropout_sample(
    candidates: CandidateSet, p: float, n: int, teacher: M.VLAModel, stream: RngStream
) -> CandidateSet:
    """Add ``n`` dropout perturbations of every base hidden state.

    Each perturbed state goes through the output projection only. The mask
    for (source, k) comes from ``stream.child(sample_id, source, k)``, so
    results do not depend on evaluation order.
    """
    if candidates.sampled:
        raise CandidateError(f"candidate set {candidates.sample_id} already sampled")
    bases = list(candidates.entries)
    if not bases or any(c.provenance not in (COARSE, FINE) for c in bases):
        raise CandidateError("MC-Dropout expects only coarse/fine base candidates")
    out = candidates.copy()
    for base in bases:
        for k in range(1, n + 1):
            s = stream.child(candidates.sample_id, base.provenance, k)
            with ad.no_grad():
                h = ad.dropout(Tensor(base.hidden), p, s).data
            out.add(Candidate(h, M.lm_head_np(teacher.params, h), f"sample:{base.provenance}:{k}"))
    out.sampled = True
    return out


# --------------------------------------------------------------------------
# selection


def candidate_losses(candidates: CandidateSet, targets: np.ndarray) -> np.ndarray:
    return np.array([ad.cross_entropy_np(c.logits, targets) for c in candidates.entries])


def select_optimal(candidates: CandidateSet, targets: np.ndarray) -> tuple[int, Candidate, float]:
    """Exact argmin of cross-entropy; ties go to the earliest entry."""
    if not len(candidates):
        raise CandidateError("empty candidate set")
    ce = candidate_losses(candidates, targets)
    k = int(np.argmin(ce))
    return k, candidates.entries[k], float(ce[k])


def mc_stream(cfg: TrainConfig, epoch: int) -> RngStream:
    return RngStream("mc-dropout", cfg.seed).child("epoch", epoch)


def build_candidates(cs: CandidateSet, teacher: M.VLAModel, cfg: TrainConfig, epoch: int) -> CandidateSet:
    if cfg.mc_dropout and cfg.mc_samples > 0:
        return mc_dropout_sample(cs, cfg.dropout_p, cfg.mc_samples, teacher, mc_stream(cfg, epoch))
    return cs


def distill_targets(
    teacher: M.VLAModel,
    samples,
    cfg: TrainConfig,
    epoch: int = 0,
    base: dict[str, CandidateSet] | None = None,
    threads: int = 1,
) -> list[Target]:
    """Selected teacher (hidden, logits) per sample, detached from any tape.

    ``base`` may hold precomputed coarse/fine candidates; greedy decoding is
    deterministic so reusing them changes nothing.
    """
    if base is None:
        base = base_candidates_all(teacher, samples, cfg.traj_refine, threads=threads)

    def one(s):
        cs = base[s.sample_id]
        if not cfg.traj_refine:
            cs = CandidateSet(cs.sample_id, [c for c in cs.entries if c.provenance == COARSE])
        cs = build_candidates(cs, teacher, cfg, epoch)
        k, cand, ce = select_optimal(cs, M.trajectory_tokens(s.waypoints))
        return Target(s.sample_id, cand.hidden.copy(), cand.logits.copy(), cand.provenance, ce, k)

    return list(ordered_map(one, samples, threads))


# --------------------------------------------------------------------------
# audit


def audit_rows(candidates: CandidateSet, targets: np.ndarray) -> list[tuple[str, str, float]]:
    ce = candidate_losses(candidates, targets)
    return [(candidates.sample_id, c.provenance, float(v)) for c, v in zip(candidates.entries, ce)]


def write_audit(path, rows) -> Path:
    """CSV (sample_id, provenance, ce_loss), written atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "provenance", "ce_loss"])
        for sid, prov, ce in rows:
            w.writerow([sid, prov, repr(float(ce))])
    os.replace(tmp, path)
    return path
