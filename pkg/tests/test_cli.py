import json

import pytest

from asymplay.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from asymplay.evalkit import SAFETY_KINDS, MetricsReport
from asymplay.simkit import load_corpus
from asymplay.trainer import load_checkpoint


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["gen-data", "--out", str(d), "--scenarios", "4", "--actors-min", "3", "--actors-max", "4", "--seed", "5"]) == EXIT_OK
    return d


def test_gen_data_deterministic(tmp_path, corpus_dir):
    assert main(["gen-data", "--out", str(tmp_path), "--scenarios", "4", "--actors-min", "3", "--actors-max", "4", "--seed", "5"]) == EXIT_OK
    assert files(tmp_path) == files(corpus_dir)
    sc = load_corpus(tmp_path)
    assert len(sc) == 4 and all(3 <= s.num_actors <= 4 for s in sc)


@pytest.mark.parametrize(
    "argv",
    [
        ["--actors-min", "5", "--actors-max", "3"],
        ["--actors-min", "0"],
        ["--scenarios", "0"],
        ["--map-preset", "moon"],
        ["--workers", "0"],
        ["--kind", "safety", "--actors-min", "1"],
    ],
)
def test_gen_data_usage_errors(tmp_path, argv):
    assert main(["gen-data", "--out", str(tmp_path)] + argv) == EXIT_USAGE


def test_gen_data_merge_preset(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--scenarios", "3", "--map-preset", "merge"]) == EXIT_OK
    assert all(s.map.has_merge for s in load_corpus(tmp_path))


def test_gen_data_safety_kind(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--scenarios", "2", "--kind", "safety"]) == EXIT_OK
    assert all(s.kind in SAFETY_KINDS for s in load_corpus(tmp_path))


def test_unknown_command_and_mode(tmp_path, corpus_dir):
    assert main(["fly"]) == EXIT_USAGE
    assert main(["train", "--mode", "bogus", "--corpus", str(corpus_dir), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["train", "--mode", "selfplay", "--corpus", str(corpus_dir), "--out", str(tmp_path), "--fairplay", "cheat"]) == EXIT_USAGE


def test_bad_log_level(tmp_path, corpus_dir, monkeypatch):
    monkeypatch.setenv("SELFPLAY_LOG", "chatty")
    assert main(["eval", "--corpus", str(corpus_dir), "--out", str(tmp_path), "--policy", "coast"]) == EXIT_USAGE


def test_eval_log_replay_zero_fde(tmp_path, corpus_dir):
    assert main(["eval", "--corpus", str(corpus_dir), "--out", str(tmp_path), "--policy", "log-replay"]) == EXIT_OK
    rep = MetricsReport.from_dict(json.loads((tmp_path / "metrics.json").read_text()))
    assert rep.fde == 0.0 and rep.collision_pct == 0.0
    assert (tmp_path / "metrics.csv").exists()
    assert json.loads((tmp_path / "resolved_config.json").read_text())["command"] == "eval"


def test_eval_missing_corpus(tmp_path):
    assert main(["eval", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path), "--policy", "coast"]) == EXIT_RUNTIME


def test_eval_needs_policy(tmp_path, corpus_dir):
    assert main(["eval", "--corpus", str(corpus_dir), "--out", str(tmp_path), "--policy", "teleport"]) == EXIT_USAGE


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--seeds", "1", "--out", str(tmp_path)]) == EXIT_OK
    assert "max relative error" in capsys.readouterr().out
    assert json.loads((tmp_path / "gradcheck.json").read_text())["max_rel_error"] < 1e-4


def _train(tmp_path, corpus_dir, name, *extra):
    out = tmp_path / name
    argv = ["train", "--corpus", str(corpus_dir), "--out", str(out), "--steps", "2", "--warmup-steps", "1", "--batch-size", "2", "--eval-every", "0"]
    assert main(argv + list(extra)) == EXIT_OK
    return out


def test_il_equals_trafficsim_without_collision_term(tmp_path, corpus_dir):
    a = _train(tmp_path, corpus_dir, "il", "--mode", "il")
    b = _train(tmp_path, corpus_dir, "ts", "--mode", "trafficsim", "--w-col", "0")
    assert (a / "train_log.csv").read_bytes() == (b / "train_log.csv").read_bytes()
    pa, pb = load_checkpoint(a / "final.aspt").params, load_checkpoint(b / "final.aspt").params
    assert all((pa["student"][k] == pb["student"][k]).all() for k in pa["student"])


def test_resolved_config_round_trip(tmp_path, corpus_dir):
    a = _train(tmp_path, corpus_dir, "a", "--mode", "selfplay", "--ablate-solvable", "--fairplay", "replay", "--hidden-dim", "16", "--num-heads", "2")
    resolved = json.loads((a / "resolved_config.json").read_text())
    assert resolved["w_solvable"] == 0.0 and resolved["three_player"] is False and resolved["replay"] is True
    assert resolved["resolved"]["policy"]["hidden_dim"] == 16
    cfg = {k: v for k, v in resolved.items() if k not in ("command", "corpus", "resolved", "mode")}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    b = _train(tmp_path, corpus_dir, "b", "--mode", "selfplay", "--config", str(tmp_path / "cfg.json"))
    assert (a / "train_log.csv").read_bytes() == (b / "train_log.csv").read_bytes()
    assert json.loads((b / "resolved_config.json").read_text())["resolved"] == resolved["resolved"]


def test_ablate_realism_is_teacher_only(tmp_path, corpus_dir):
    a = _train(tmp_path, corpus_dir, "r", "--mode", "selfplay", "--steps", "1", "--ablate-realism", "--beta", "0.3")
    obj = json.loads((a / "resolved_config.json").read_text())["resolved"]["objective"]
    assert obj["beta"] == 0.0 and obj["student_beta"] == 0.3


def test_unknown_config_key(tmp_path, corpus_dir):
    (tmp_path / "cfg.json").write_text(json.dumps({"warp_factor": 9}))
    argv = ["train", "--mode", "il", "--corpus", str(corpus_dir), "--out", str(tmp_path / "o"), "--config", str(tmp_path / "cfg.json")]
    assert main(argv) == EXIT_USAGE


def test_curation_needs_base(tmp_path, corpus_dir):
    assert main(["train", "--mode", "curation", "--corpus", str(corpus_dir), "--out", str(tmp_path)]) == EXIT_USAGE


def test_resume_via_cli(tmp_path, corpus_dir):
    full = _train(tmp_path, corpus_dir, "full", "--mode", "selfplay", "--steps", "4")
    part = _train(tmp_path, corpus_dir, "part", "--mode", "selfplay", "--steps", "4", "--ckpt-every", "2")
    # emulate an interruption after step 2: trim the log and resume from the step-2 checkpoint
    lines = (part / "train_log.csv").read_text().splitlines(keepends=True)
    (part / "train_log.csv").write_text("".join(lines[:3]))
    _train(tmp_path, corpus_dir, "part", "--mode", "selfplay", "--steps", "4", "--resume", str(part / "checkpoint_000002.aspt"))
    assert (full / "train_log.csv").read_bytes() == (part / "train_log.csv").read_bytes()
    assert (full / "final.aspt").read_bytes() == (part / "final.aspt").read_bytes()


def test_attack_zeroshot_and_king(tmp_path, corpus_dir):
    sp = _train(tmp_path, corpus_dir, "sp", "--mode", "selfplay")
    z = tmp_path / "z"
    assert main(["attack", "--kind", "zeroshot", "--corpus", str(corpus_dir), "--out", str(z), "--teacher", str(sp / "final.aspt")]) == EXIT_OK
    rate = json.loads((z / "outcomes.json").read_text())["ego_collision_rate"]
    assert 0.0 <= rate <= 1.0
    k = tmp_path / "k"
    argv = ["attack", "--kind", "king", "--corpus", str(corpus_dir), "--out", str(k), "--checkpoint", str(sp / "final.aspt"), "--steps", "2", "--repair-steps", "1"]
    assert main(argv) == EXIT_OK
    attacked = load_corpus(k / "corpus")
    assert len(attacked) == 4 and all(s.kind == "adversarial" and s.scripted is not None for s in attacked)
    assert len(json.loads((k / "verdicts.json").read_text())) == 4
    assert main(["attack", "--kind", "king", "--corpus", str(corpus_dir), "--out", str(k)]) == EXIT_USAGE


def test_report_logs_and_pareto(tmp_path, corpus_dir):
    a = _train(tmp_path, corpus_dir, "run_a", "--mode", "il")
    assert main(["report", "--out", str(tmp_path / "rep"), "--logs", str(a)]) == EXIT_OK
    merged = (tmp_path / "rep" / "training_curves.csv").read_text().splitlines()
    assert merged[0].startswith("run,") and len(merged) == 3
    sweep = tmp_path / "sweep"
    for name in ("w_col_0.0", "w_col_1.0", "selfplay"):
        ev = ["eval", "--corpus", str(corpus_dir), "--out", str(sweep / name), "--policy", "coast"]
        assert main(ev + ["--stem", "nominal_metrics"]) == EXIT_OK
        assert main(ev + ["--stem", "safety_metrics"]) == EXIT_OK
    assert main(["report", "--out", str(tmp_path / "rep"), "--pareto", str(sweep)]) == EXIT_OK
    rows = (tmp_path / "rep" / "pareto.csv").read_text().splitlines()
    assert len(rows) == 4
    assert main(["report", "--out", str(tmp_path / "rep"), "--pareto", str(tmp_path / "missing")]) == EXIT_RUNTIME
