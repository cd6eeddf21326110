import dataclasses

import numpy as np
import pytest
import torch

from asymplay.objectives import exact_collision
from asymplay.simkit import LogReplayController, make_batch, sample_partition
from asymplay.trainer import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    TrainConfig,
    TrainState,
    _assert_disjoint,
    checkpoint_bytes,
    curate,
    failure_flags,
    gradcheck_scene,
    il_train,
    king_attack_batch,
    load_checkpoint,
    read_log,
    save_checkpoint,
    selfplay_train,
    student_from_checkpoint,
    student_loss_gradcheck,
    teacher_from_checkpoint,
)


def tiny_cfg(**kw):
    base = dict(total_steps=10, warmup_steps=2, batch_size=2, lr_peak=1e-3, eval_every=0, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def same_state(a: TrainState, b: TrainState) -> bool:
    return checkpoint_bytes(a.to_checkpoint()) == checkpoint_bytes(b.to_checkpoint())


# ---------------------------------------------------------------------------
# config


@pytest.mark.parametrize(
    "kw",
    [dict(batch_size=0), dict(total_steps=0), dict(warmup_steps=-1), dict(lr_peak=-1.0), dict(teacher_frac=0.0), dict(teacher_frac=1.0)],
)
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_dict_round_trip():
    cfg = tiny_cfg(w_col=0.5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_warmup_clamped_below_total():
    assert TrainConfig(total_steps=5, warmup_steps=100).effective_warmup == 4


def test_unknown_mode():
    with pytest.raises(ValueError):
        TrainState("bogus", tiny_cfg())


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bytes(tmp_path):
    st = TrainState("selfplay", tiny_cfg())
    ck = st.to_checkpoint()
    save_checkpoint(ck, tmp_path / "a.aspt")
    back = load_checkpoint(tmp_path / "a.aspt")
    assert checkpoint_bytes(back) == checkpoint_bytes(ck)
    assert same_state(TrainState.from_checkpoint(back), st)


def test_checkpoint_policies_extracted():
    st = TrainState("selfplay", tiny_cfg())
    ck = st.to_checkpoint()
    for src, dst in ((st.student, student_from_checkpoint(ck)), (st.teacher, teacher_from_checkpoint(ck))):
        for (n, p), (m, q) in zip(src.named_parameters(), dst.named_parameters()):
            assert n == m and torch.equal(p, q)


def test_il_checkpoint_has_no_teacher():
    ck = TrainState("il", tiny_cfg()).to_checkpoint()
    with pytest.raises(ValueError):
        teacher_from_checkpoint(ck)


def test_corrupted_checkpoint_rejected(tmp_path):
    path = tmp_path / "c.aspt"
    save_checkpoint(TrainState("il", tiny_cfg()).to_checkpoint(), path)
    data = bytearray(path.read_bytes())
    for pos in (len(data) // 2, 20, len(data) - 10):
        bad = bytearray(data)
        bad[pos] ^= 0x01
        path.write_bytes(bytes(bad))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
    path.write_bytes(bytes(data[: len(data) // 3]))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    ck = dataclasses.replace(TrainState("il", tiny_cfg()).to_checkpoint(), version=99)
    save_checkpoint(ck, tmp_path / "v.aspt")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.aspt")


def test_checkpoint_magic():
    assert checkpoint_bytes(TrainState("il", tiny_cfg()).to_checkpoint())[:4] == CHECKPOINT_MAGIC


# ---------------------------------------------------------------------------
# determinism and resume


def test_selfplay_logs_bitwise_reproducible(tmp_path, small_corpus):
    cfg = tiny_cfg(total_steps=4)
    selfplay_train(small_corpus, cfg, out_dir=tmp_path / "a")
    selfplay_train(small_corpus, cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    assert (tmp_path / "a" / "final.aspt").read_bytes() == (tmp_path / "b" / "final.aspt").read_bytes()


@pytest.mark.parametrize("mode", ["selfplay", "trafficsim"])
def test_resume_matches_uninterrupted(tmp_path, small_corpus, mode):
    cfg = tiny_cfg(total_steps=10)

    def train(**kw):
        if mode == "selfplay":
            return selfplay_train(small_corpus, cfg, **kw)
        return il_train(small_corpus, cfg, w_col=1.0, **kw)

    full = train(out_dir=tmp_path / "full")
    train(out_dir=tmp_path / "part", stop_after=4, ckpt_every=4)
    ck = load_checkpoint(tmp_path / "part" / "checkpoint_000004.aspt")
    resumed = train(out_dir=tmp_path / "part", resume=ck)
    assert resumed.state.step == 10
    assert same_state(full.state, resumed.state)
    assert (tmp_path / "full" / "train_log.csv").read_bytes() == (tmp_path / "part" / "train_log.csv").read_bytes()


def test_different_seeds_differ(small_corpus):
    a = selfplay_train(small_corpus, tiny_cfg(total_steps=2, seed=1))
    b = selfplay_train(small_corpus, tiny_cfg(total_steps=2, seed=2))
    assert a.log[-1]["loss_student"] != b.log[-1]["loss_student"]


def test_teacher_student_disjoint():
    st = TrainState("selfplay", tiny_cfg())
    _assert_disjoint(st)
    assert st.teacher is not st.student


def test_log_columns_and_eval(tmp_path, small_corpus):
    selfplay_train(small_corpus, tiny_cfg(total_steps=3, eval_every=2, eval_scenarios=2), out_dir=tmp_path)
    rows = read_log(tmp_path / "train_log.csv")
    assert [r["step"] for r in rows] == ["1", "2", "3"]
    assert rows[0]["col_rate_eval"] == "" and rows[1]["col_rate_eval"] != "" and rows[2]["col_rate_eval"] != ""
    for r in rows:
        for k in ("loss_teacher", "loss_student", "challenge", "solvable", "realism_demo", "realism_mixed"):
            assert np.isfinite(float(r[k]))


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        selfplay_train([], tiny_cfg())
    with pytest.raises(ValueError):
        il_train([], tiny_cfg())


# ---------------------------------------------------------------------------
# IL


def test_il_learns_on_one_scenario(small_corpus):
    cfg = tiny_cfg(total_steps=40, warmup_steps=4, batch_size=1, lr_peak=3e-3)
    res = il_train(small_corpus[:1], cfg)
    first = np.mean([r["loss"] for r in res.log[:5]])
    last = np.mean([r["loss"] for r in res.log[-5:]])
    assert last < 0.7 * first


def test_il_mode_names(small_corpus):
    assert il_train(small_corpus, tiny_cfg(total_steps=1)).state.mode == "il"
    assert il_train(small_corpus, tiny_cfg(total_steps=1), w_col=0.5).state.mode == "trafficsim"


def test_il_equals_trafficsim_at_zero_weight(small_corpus):
    a = il_train(small_corpus, tiny_cfg(total_steps=3), w_col=0.0)
    b = il_train(small_corpus, tiny_cfg(total_steps=3), w_col=0.0, mode="trafficsim")
    assert same_state_params(a.state, b.state)


def same_state_params(a, b):
    return all(torch.equal(p, q) for p, q in zip(a.student.parameters(), b.student.parameters()))


# ---------------------------------------------------------------------------
# curation


def test_curation_matches_flag_oracle(small_corpus):
    from asymplay.evalkit import simulate
    from asymplay.simkit import CoastController

    policy = CoastController()
    flags = failure_flags(policy, small_corpus)
    oracle = []
    for sc in small_corpus:
        st, _ = simulate(policy, sc)
        oracle.append(bool(exact_collision(st, sc.dims).any()))
    assert flags == oracle
    picked = curate(small_corpus, policy)
    assert [s.name for s in picked] == [s.name for s, f in zip(small_corpus, oracle) if f]


def test_curation_empty_for_clean_logs(small_corpus):
    # the generated logs are collision-free, so replaying them selects nothing
    assert curate(small_corpus, LogReplayController()) == []


# ---------------------------------------------------------------------------
# KING


def _king_batch(seed=0):
    sc = gradcheck_scene(seed)
    part = sample_partition(sc.num_actors, np.random.default_rng(seed), 0.5)
    return make_batch([sc]).with_partitions([part])


def test_king_zero_steps_returns_log_actions():
    from asymplay.policy import make_student

    batch = _king_batch()
    cfg = TrainConfig(king_steps=0, king_repair_steps=0)
    res = king_attack_batch(batch, make_student(cfg.policy, seed=0), cfg)
    assert torch.equal(res.actions, batch.log_actions)
    assert res.initial_collision == res.final_collision


def test_king_increases_collision_loss():
    from asymplay.policy import make_student

    cfg = TrainConfig(king_steps=30, king_repair_steps=0)
    gains = []
    for seed in range(3):
        batch = _king_batch(seed)
        res = king_attack_batch(batch, make_student(cfg.policy, seed=0), cfg)
        gains.append(res.final_collision[0] - res.initial_collision[0])
        pc = cfg.policy
        assert float(res.actions[..., 0].abs().max()) <= pc.u_max
        assert float(res.actions[..., 1].abs().max()) <= pc.phi_max
    assert min(gains) > 0.0


def test_king_leaves_policy_trainable():
    from asymplay.policy import make_student

    cfg = TrainConfig(king_steps=1, king_repair_steps=1)
    pol = make_student(cfg.policy, seed=0)
    king_attack_batch(_king_batch(), pol, cfg)
    assert all(p.requires_grad for p in pol.parameters())


# ---------------------------------------------------------------------------
# gradient check


def test_student_loss_gradcheck_small():
    r = student_loss_gradcheck(0, n_coords=4, n_dirs=1)
    assert r.rel_error < 1e-4
    assert r.loss > 0.0
    assert r.num_coords == 5
