import csv
import math

import numpy as np
import pytest

from vladistill import model as M
from vladistill import oracle as O
from vladistill import scenario as sc
from vladistill.autodiff import RngStream, cross_entropy_np
from vladistill.config import TrainConfig


@pytest.fixture(scope="module")
def data():
    return sc.build_dataset(10, seed=5)


@pytest.fixture(scope="module")
def teacher():
    return M.VLAModel.create(9).freeze()


@pytest.fixture(scope="module")
def base(teacher, data):
    return O.base_candidates_all(teacher, data.train[:6])


def test_coarse_and_refine_deterministic(teacher, data):
    b = M.Batch.from_samples(data.train[:3])
    c1, o1 = O.coarse_predict(teacher, b)
    c2, o2 = O.coarse_predict(teacher, b)
    assert c1.tobytes() == c2.tobytes() and o1.logits.data.tobytes() == o2.logits.data.tobytes()
    f1, _ = O.refine_predict(teacher, b, c1)
    f2, _ = O.refine_predict(teacher, b, c1)
    assert f1.tobytes() == f2.tobytes()
    with pytest.raises(ValueError):
        O.refine_predict(teacher, b, c1[:, :10])
    b.future_views = None
    with pytest.raises(ValueError):
        O.coarse_predict(teacher, b)


def test_untrained_ce_near_uniform(base, data):
    for s in data.train[:6]:
        ce = O.candidate_losses(base[s.sample_id], M.trajectory_tokens(s.waypoints))
        assert np.all(np.abs(ce - math.log(M.VOCAB)) < 0.5)


def test_mc_dropout_set_size_and_reprojection(teacher, base):
    cs = base[next(iter(base))]
    assert [c.provenance for c in cs.entries] == ["coarse", "fine"]
    full = O.mc_dropout_sample(cs, 0.1, 10, teacher, RngStream("mc", 0))
    assert len(full) == len(full.hiddens) == len(full.logits) == 22
    assert len({c.provenance for c in full.entries}) == 22
    assert len(cs) == 2  # input set untouched
    for c in full.entries[2:]:
        assert c.logits.tobytes() == M.lm_head_np(teacher.params, c.hidden).tobytes()
    assert full.entries[2].provenance == "sample:coarse:1"
    assert full.entries[-1].provenance == "sample:fine:10"
    with pytest.raises(O.CandidateError):
        O.mc_dropout_sample(full, 0.1, 10, teacher, RngStream("mc", 0))


def test_mc_dropout_replayable_and_p_zero(teacher, base, data):
    cs = base[data.train[0].sample_id]
    a = O.mc_dropout_sample(cs, 0.1, 4, teacher, RngStream("mc", 3))
    b = O.mc_dropout_sample(cs, 0.1, 4, teacher, RngStream("mc", 3))
    assert all(x.hidden.tobytes() == y.hidden.tobytes() for x, y in zip(a.entries, b.entries))
    z = O.mc_dropout_sample(cs, 0.0, 4, teacher, RngStream("mc", 3))
    for c in z.entries[2:]:
        src = cs.entries[0] if c.source == "coarse" else cs.entries[1]
        assert c.hidden.tobytes() == src.hidden.tobytes()
    tg = M.trajectory_tokens(data.train[0].waypoints)
    assert O.candidate_losses(z, tg).min() == O.candidate_losses(cs, tg).min()
    assert O.candidate_losses(a, tg).min() <= O.candidate_losses(cs, tg).min()


def _fake_set(n, hot=None, ties=False):
    rng = np.random.default_rng(0)
    cs = O.CandidateSet("x:0")
    tg = np.arange(M.N_TRAJ) % 128
    for i in range(n):
        logits = rng.standard_normal((M.N_TRAJ, M.VOCAB)).astype(np.float32)
        if ties:
            logits = np.zeros_like(logits)
        if i == hot:
            logits[:] = -30.0
            logits[np.arange(M.N_TRAJ), tg] = 30.0
        cs.add(O.Candidate(np.zeros((M.N_TRAJ, M.D_MODEL), np.float32), logits, f"e{i}"))
    return cs, tg


def test_select_optimal_examples():
    cs, tg = _fake_set(6, hot=3)
    k, cand, ce = O.select_optimal(cs, tg)
    assert k == 3 and cand.provenance == "e3" and ce < 1e-10
    cs, tg = _fake_set(5, ties=True)
    assert O.select_optimal(cs, tg)[0] == 0
    with pytest.raises(O.CandidateError):
        O.select_optimal(O.CandidateSet("empty"), tg)


def test_select_matches_brute_force(teacher, base, data):
    for s in data.train[:6]:
        full = O.mc_dropout_sample(base[s.sample_id], 0.1, 10, teacher, RngStream("mc", 1))
        tg = M.trajectory_tokens(s.waypoints)
        best, best_k = math.inf, -1
        for i, c in enumerate(full.entries):
            v = cross_entropy_np(c.logits, tg)
            if v < best:
                best, best_k = v, i
        k, _, ce = O.select_optimal(full, tg)
        assert (k, ce) == (best_k, best)
        assert ce <= min(O.candidate_losses(base[s.sample_id], tg))


def test_duplicate_provenance_rejected():
    cs, _ = _fake_set(2)
    with pytest.raises(O.CandidateError):
        cs.add(O.Candidate(cs.entries[0].hidden, cs.entries[0].logits, "e0"))


def test_distill_targets(teacher, base, data):
    samples = data.train[:6]
    digest = teacher.fingerprint()
    cfg = TrainConfig()
    a = O.distill_targets(teacher, samples, cfg, epoch=0, base=base)
    b = O.distill_targets(teacher, samples, cfg, epoch=0, base=None, threads=3)
    for x, y in zip(a, b):
        assert x.hidden.tobytes() == y.hidden.tobytes() and x.provenance == y.provenance
        assert isinstance(x.hidden, np.ndarray) and isinstance(x.logits, np.ndarray)
    assert teacher.fingerprint() == digest
    # p = 0 reduces to choosing between coarse and fine
    z = O.distill_targets(teacher, samples, cfg.with_overrides(dropout_p=0.0), base=base)
    for t, s in zip(z, samples):
        ce = O.candidate_losses(base[s.sample_id], M.trajectory_tokens(s.waypoints))
        assert t.ce == ce.min()
    no_mc = O.distill_targets(teacher, samples, cfg.with_overrides(mc_dropout=False), base=base)
    assert {t.provenance for t in no_mc} <= {"coarse", "fine"}


def test_refine_off_candidate_set(teacher, base, data):
    cfg = TrainConfig(traj_refine=False)
    s = data.train[0]
    cs = O.CandidateSet(s.sample_id, [c for c in base[s.sample_id].entries if c.provenance == "coarse"])
    full = O.build_candidates(cs, teacher, cfg, 0)
    assert len(full) == 1 + cfg.mc_samples
    assert all(c.source == "coarse" for c in full.entries)
    t = O.distill_targets(teacher, [s], cfg, base=base)[0]
    assert "fine" not in t.provenance


def test_epoch_changes_samples(teacher, base, data):
    cs = base[data.train[0].sample_id]
    cfg = TrainConfig()
    a = O.build_candidates(cs, teacher, cfg, 0)
    b = O.build_candidates(cs, teacher, cfg, 1)
    assert a.entries[5].hidden.tobytes() != b.entries[5].hidden.tobytes()


def test_audit_csv(tmp_path, teacher, base, data):
    s = data.train[0]
    full = O.mc_dropout_sample(base[s.sample_id], 0.1, 10, teacher, RngStream("mc", 0))
    rows = O.audit_rows(full, M.trajectory_tokens(s.waypoints))
    path = O.write_audit(tmp_path / "audit.csv", rows)
    back = list(csv.reader(path.open()))
    assert back[0] == ["sample_id", "provenance", "ce_loss"]
    assert len(back) == 23
    assert float(back[1][2]) == rows[0][2]
