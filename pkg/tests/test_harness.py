import json
import math

import numpy as np
import pytest
import torch

from structdial.checkpoint import from_bytes, load_checkpoint, save_checkpoint, to_bytes
from structdial.errors import ConfigError, DataError, NumericError, VersionError
from structdial.harness import train as train_mod
from structdial.harness.cli import main
from structdial.harness.config import RunConfig, config_from_mapping, dump_config, load_config, parse_config_text
from structdial.harness.train import (
    Corpora,
    run_dap_posttrain,
    run_finetune,
    run_mtf,
    run_regime,
    sweep_delta,
)
from structdial.objectives import rederive_total
from structdial.synthcorpus import SynthConfig, generate, split
from structdial.text.corpus import save_corpus

TINY = dict(hidden=16, layers=1, heads=2, ffn=32, max_len=48, max_position=48, batch_size=8, lr=1e-3)


@pytest.fixture(scope="module")
def corpora():
    corpus = generate(SynthConfig(dialogues=40, turns_mean=5, turns_spread=1, words_mean=5, words_spread=1,
                                  svo_density=0.5, seed=3))
    train, valid = split(corpus, (0.75, 0.25), seed=0)
    return Corpora(train, valid)


def tiny(**kw):
    return RunConfig(**{**TINY, **kw})


# ---------------------------------------------------------------------------
# config


class TestConfig:
    def test_key_value(self):
        data = parse_config_text("regime = mtf  # comment\n\nlr = 0.001\neval_pairs = 10:1,10:2\n")
        cfg = config_from_mapping(data)
        assert cfg.lr == 0.001 and cfg.eval_pairs == [(10, 1), (10, 2)]

    def test_json(self):
        cfg = config_from_mapping(parse_config_text('{"regime": "dap-posttrain", "epochs": 2}'))
        assert cfg.regime == "dap-posttrain" and cfg.num_epochs == 2

    def test_dump_round_trip(self, tmp_path):
        cfg = tiny(eval_pairs=[(2, 1)], init_checkpoint=None, keep_pretrain_heads=True)
        (tmp_path / "c.txt").write_text(dump_config(cfg))
        assert load_config(tmp_path / "c.txt") == cfg

    @pytest.mark.parametrize("text", ["nope = 1", "delta = 1.5", "regime = pretrain", "lr = fast",
                                      "hidden = 10\nheads = 4", "lambda2 = -1", "just words"])
    def test_schema_violations(self, text):
        with pytest.raises(ConfigError):
            config_from_mapping(parse_config_text(text))

    def test_default_epochs(self):
        assert RunConfig(regime="dap-posttrain").num_epochs == 3
        assert RunConfig(regime="baseline-finetune").num_epochs == 2


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_byte_identical(tmp_path, corpora):
    res = run_dap_posttrain(tiny(regime="dap-posttrain", max_steps=3), corpora)
    save_checkpoint(res.checkpoint, tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert res.checkpoint.optimizer and res.checkpoint.meta["step"] == 3


def test_checkpoint_rebuilds_model(corpora):
    res = run_dap_posttrain(tiny(regime="dap-posttrain", max_steps=2), corpora)
    model = from_bytes(to_bytes(res.checkpoint)).build_model()
    for (n1, a), (n2, b) in zip(res.model.state_dict().items(), model.state_dict().items()):
        assert n1 == n2 and torch.equal(a, b)


def test_checkpoint_bad_files(corpora):
    with pytest.raises(DataError):
        from_bytes(b"garbage")
    data = to_bytes(run_dap_posttrain(tiny(regime="dap-posttrain", max_steps=1), corpora).checkpoint)
    with pytest.raises(VersionError):
        from_bytes(data.replace(b'"format_version":1', b'"format_version":9'))


# ---------------------------------------------------------------------------
# post-training


def test_disabled_components_log_zero(corpora):
    res = run_dap_posttrain(tiny(regime="dap-posttrain", lambda2=0, lambda3=0, max_steps=6), corpora)
    assert all(s["uor"] == 0.0 and s["sbr"] == 0.0 for s in res.log.steps)
    assert all(s["mlm"] > 0 and s["nsp"] > 0 for s in res.log.steps)


def test_logged_totals_rederive(corpora):
    cfg = tiny(regime="dap-posttrain", lambda1=0.5, lambda2=2.0, lambda3=3.0, max_steps=6, delta=0.6)
    res = run_dap_posttrain(cfg, corpora)
    steps = [s["step"] for s in res.log.steps]
    assert steps == sorted(set(steps))
    for s in res.log.steps:
        assert math.isfinite(s["total"])
        assert abs(s["total"] - rederive_total(s, "dap", cfg.weights())) <= 1e-9
    assert any(s["uor"] > 0 for s in res.log.steps)


def test_loss_decreases(corpora):
    res = run_dap_posttrain(tiny(regime="dap-posttrain", max_steps=200, epochs=100), corpora)
    totals = [s["total"] for s in res.log.steps]
    ema = totals[0]
    for t in totals[1:]:
        ema = 0.9 * ema + 0.1 * t
    assert ema < totals[9]


def test_resume_matches(tmp_path, corpora):
    cfg = tiny(regime="dap-posttrain", max_steps=8, epochs=10, checkpoint_every=4)
    full = run_dap_posttrain(cfg, corpora, run_dir=tmp_path / "full")
    resumed = run_dap_posttrain(cfg, corpora, resume=tmp_path / "full" / "step000004.ckpt")
    assert [s["step"] for s in resumed.log.steps] == [5, 6, 7, 8]
    assert resumed.log.losses() == full.log.losses()[4:]
    assert to_bytes(resumed.checkpoint) == to_bytes(full.checkpoint)


def test_non_finite_loss_aborts(tmp_path, corpora, monkeypatch):
    real = train_mod.component_losses
    calls = {"n": 0}

    def poisoned(*args, **kw):
        out, counts = real(*args, **kw)
        calls["n"] += 1
        if calls["n"] == 3:
            out["mlm"] = out["mlm"] * float("nan")
        return out, counts

    monkeypatch.setattr(train_mod, "component_losses", poisoned)
    with pytest.raises(NumericError, match="step 3"):
        run_dap_posttrain(tiny(regime="dap-posttrain", max_steps=5), corpora, run_dir=tmp_path)
    assert load_checkpoint(tmp_path / "last_good.ckpt").meta["step"] == 2


def test_missing_corpus():
    with pytest.raises(OSError):
        run_dap_posttrain(tiny(regime="dap-posttrain", train_corpus="/nonexistent.jsonl"))


# ---------------------------------------------------------------------------
# fine-tuning and MTF


def test_zero_epochs_returns_init(corpora):
    stage1 = run_dap_posttrain(tiny(regime="dap-posttrain", max_steps=2), corpora)
    res = run_finetune(tiny(regime="dap-finetune", epochs=0), corpora, init=stage1.checkpoint)
    assert res.checkpoint is stage1.checkpoint and not res.log.steps


def test_stage_one_loads_cleanly(corpora):
    stage1 = run_dap_posttrain(tiny(regime="dap-posttrain", max_steps=2), corpora)
    res = run_finetune(tiny(regime="dap-finetune", max_steps=2), corpora, init=stage1.checkpoint)
    enc = {k: v for k, v in res.model.state_dict().items() if k.startswith("encoder.")}
    assert enc and set(enc) <= set(stage1.checkpoint.params)


def test_incompatible_checkpoint(corpora):
    stage1 = run_dap_posttrain(tiny(regime="dap-posttrain", max_steps=1), corpora)
    with pytest.raises(VersionError):
        run_finetune(tiny(regime="dap-finetune", hidden=32), corpora, init=stage1.checkpoint)


def test_finetune_optimizes_dm_only(corpora):
    res = run_finetune(tiny(regime="baseline-finetune", max_steps=4), corpora)
    assert all(s["uor"] == s["sbr"] == 0.0 and s["dm"] > 0 for s in res.log.steps)
    assert res.report is not None and res.best_epoch == 0


def test_regime_checked(corpora):
    with pytest.raises(ConfigError):
        run_finetune(tiny(regime="mtf"), corpora)
    with pytest.raises(ConfigError):
        run_mtf(tiny(regime="baseline-finetune"), corpora)


def test_mtf_reduces_to_baseline(corpora):
    mtf = run_mtf(tiny(regime="mtf", beta2=0, beta3=0, max_steps=10), corpora)
    base = run_finetune(tiny(regime="baseline-finetune", max_steps=10), corpora)
    assert mtf.log.losses() == base.log.losses()
    assert mtf.report.to_dict() == base.report.to_dict()


def test_mtf_totals(corpora):
    cfg = tiny(regime="mtf", beta2=0.5, beta3=2.0, max_steps=6)
    res = run_mtf(cfg, corpora)
    for s in res.log.steps:
        assert abs(s["total"] - rederive_total(s, "mtf", cfg.weights())) <= 1e-9
    assert any(s["uor"] > 0 for s in res.log.steps)


def test_multichoice_finetune():
    corpus = generate(SynthConfig(dialogues=24, turns_mean=4, turns_spread=1, words_mean=4, candidates=4, seed=1))
    res = run_finetune(tiny(regime="baseline-finetune", task="multichoice", max_steps=3), Corpora(corpus))
    assert "R4@1" in res.report.recall


def test_run_regime_two_stage(tmp_path, corpora):
    res = run_regime(tiny(regime="dap-finetune", epochs=1, max_steps=2), corpora, tmp_path)
    assert (tmp_path / "posttrain" / "checkpoint.ckpt").exists()
    assert (tmp_path / "finetune" / "report.json").exists()
    assert res.report is not None


def test_sweep_rows(tmp_path, corpora):
    cfg = tiny(regime="mtf", max_steps=3)
    rows = sweep_delta(cfg, (0.0, 0.5, 1.0), corpora, tmp_path)
    assert [r.delta for r in rows] == [0.0, 0.5, 1.0]
    assert len((tmp_path / "sweep.tsv").read_text().splitlines()) == 4
    assert len(json.loads((tmp_path / "sweep.json").read_text())) == 3


# ---------------------------------------------------------------------------
# CLI


def test_cli_synth_deterministic(tmp_path, capsys):
    for out in ("a", "b"):
        assert main(["synth", "--dialogues", "30", "--seed", "7", "--out", str(tmp_path / out)]) == 0
    for name in ("train.jsonl", "valid.jsonl", "test.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_eval_predictions(tmp_path, capsys):
    path = tmp_path / "p.jsonl"
    path.write_text(json.dumps({"id": "a", "scores": [0.1, 0.9], "labels": [0, 1]}) + "\n"
                    + json.dumps({"id": "b", "scores": [0.9, 0.1], "labels": [0, 1]}) + "\n")
    assert main(["eval", "--predictions", str(path), "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["mrr"] == 0.75 and report["recall"]["R2@1"] == 0.5


def test_cli_train_and_eval(tmp_path, capsys, monkeypatch, corpora):
    monkeypatch.setenv("STRUCTDIAL_RUN_ROOT", str(tmp_path / "runs"))
    save_corpus(corpora.train, tmp_path / "train.jsonl")
    save_corpus(corpora.valid, tmp_path / "valid.jsonl")
    (tmp_path / "cfg.txt").write_text("hidden = 16\nheads = 2\nffn = 32\nlayers = 1\nmax_len = 48\n"
                                      "max_position = 48\nmax_steps = 999\n")
    args = ["finetune", "--config", str(tmp_path / "cfg.txt"), "--max-steps", "2",
            "--train-corpus", str(tmp_path / "train.jsonl"), "--valid-corpus", str(tmp_path / "valid.jsonl")]
    assert main(args) == 0
    run_dir = next((tmp_path / "runs").iterdir())
    assert run_dir.name.endswith("-seed0")
    config_text = (run_dir / "config.txt").read_text()
    assert "max_steps = 2" in config_text and "regime = baseline-finetune" in config_text
    assert len((run_dir / "train_log.jsonl").read_text().splitlines()) == 2
    assert (run_dir / "run.log").exists()
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run_dir / "checkpoint.ckpt"), "--corpus",
                 str(tmp_path / "valid.jsonl"), "--max-len", "48"]) == 0
    assert "R2@1" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["bogus"]) == 2
    assert main(["synth", "--no-such-flag"]) == 2
    assert main(["mtf", "--delta", "3", "--run-dir", str(tmp_path / "r")]) == 3
    (tmp_path / "bad.txt").write_text("unknown_key = 1\n")
    assert main(["mtf", "--config", str(tmp_path / "bad.txt")]) == 3
    assert main(["sweep", "--deltas", "0.5", "--run-dir", str(tmp_path / "s")]) == 3
    assert main(["mtf", "--train-corpus", str(tmp_path / "missing.jsonl"), "--run-dir", str(tmp_path / "m")]) == 1
    assert main(["eval"]) == 2


def test_cli_gradcheck_subset(capsys):
    assert main(["gradcheck", "--seeds", "1", "--losses", "sbr,nsp"]) == 0
    assert "2/2 checks passed" in capsys.readouterr().out
