"""End-to-end acceptance criteria 1-9.

Each test records one PASS/FAIL line, printed in the "acceptance criteria"
section of the pytest summary. Run only these with ``pytest -m acceptance``.
"""

import math
import time

import numpy as np
import pytest
import torch

from oracles import brute_metrics, random_instances
from structdial.checkpoint import load_checkpoint, save_checkpoint, to_bytes
from structdial.evaluation import RankingInstance, average_precision, compute_report, mean_reciprocal_rank
from structdial.harness.config import RunConfig
from structdial.harness.gradsuite import LOSSES, run_suite
from structdial.harness.probes import mean_backbone_cosine, uor_accuracy
from structdial.harness.train import (
    Corpora,
    _epoch_order,
    _step_generator,
    corpus_vocab,
    run_dap_posttrain,
    run_finetune,
    run_mtf,
    sweep_delta,
)
from structdial.model import DialogueModel
from structdial.numerics import AdamW
from structdial.objectives import LossWeights, dap_loss, mlm_loss, mtf_loss, nsp_loss
from structdial.synthcorpus import SynthConfig, generate, split
from structdial.text import Utterance, assemble, make_nsp_pair, permute_utterances, restore_order
from structdial.text.corruption import corrupt
from structdial.text.vocab import build_vocab

pytestmark = pytest.mark.acceptance


# ---------------------------------------------------------------------------
# 1. gradient suite


def test_c1_gradient_suite(criterion):
    t = time.perf_counter()
    results = run_suite(seeds=20)
    seconds = time.perf_counter() - t
    per_loss = {loss: sum(r.loss == loss for r in results) for loss in LOSSES}
    failed = [r for r in results if not r.passed]
    worst = max(r.report.max_rel_error for r in results)
    ok = not failed and min(per_loss.values()) >= 20 and seconds < 120
    criterion(1, ok, f"{len(results) - len(failed)}/{len(results)} checks, worst rel err {worst:.2e}, "
                     f"{seconds:.0f}s")
    assert not failed, [(r.loss, r.seed, r.report.max_rel_error) for r in failed]
    assert seconds < 120


# ---------------------------------------------------------------------------
# 2. composite-loss identities


def _plain_lm_reference(cfg, corpus, steps):
    """Independent MLM + NSP training loop with the trainer's seeding scheme."""
    vocab = corpus_vocab(corpus)
    model = DialogueModel(cfg.encoder_config(len(vocab)))
    opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    per_epoch = math.ceil(len(corpus) / cfg.batch_size)
    out = []
    for step in range(1, steps + 1):
        epoch, j = divmod(step - 1, per_epoch)
        idx = _epoch_order(cfg.seed, epoch, len(corpus))[j * cfg.batch_size:(j + 1) * cfg.batch_size]
        records = []
        for i in idx:
            seed = [cfg.seed, epoch, int(i)]
            seq, label, _ = make_nsp_pair(corpus[i], corpus, vocab, seed + [1], cfg.max_len, cfg.max_utterances)
            records.append(corrupt(seq, len(vocab), seed + [2], 0.0, cfg.mask_rate, nsp_label=label))
        model.train()
        H = model.hidden_states(records, train_mode=True, generator=_step_generator(cfg.seed, step))
        labels = torch.from_numpy(np.stack([r.mlm_labels for r in records]))
        mlm, _ = mlm_loss(H, labels, model.encoder.token_embedding.weight, model.heads.mlm_bias)
        nsp = nsp_loss(model.pooled(H), [r.nsp_label for r in records], model.heads.nsp)
        loss = mlm + nsp
        opt.zero_grad()
        loss.backward()
        opt.step()
        out.append((float(mlm.detach()), float(nsp.detach())))
    return out


def _same_weights(a, b):
    """Parameter and optimizer tensors bit-identical (meta such as the regime name may differ)."""
    def same(x, y):
        return x.keys() == y.keys() and all(x[k].tobytes() == y[k].tobytes() for k in x)
    return same(a.params, b.params) and same(a.optimizer, b.optimizer) and a.optimizer_steps == b.optimizer_steps


def test_c2_composite_identities(criterion):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        c = dict(zip(("mlm", "nsp", "uor", "sbr", "dm"), rng.uniform(0, 10, 5)))
        w = LossWeights(*rng.uniform(0, 5, 6))
        dap_ref = w.lambda1 * (c["mlm"] + c["nsp"]) + w.lambda2 * c["uor"] + w.lambda3 * c["sbr"]
        mtf_ref = w.beta1 * c["dm"] + w.beta2 * c["uor"] + w.beta3 * c["sbr"]
        tensors = {k: torch.tensor(v, dtype=torch.double) for k, v in c.items()}
        for got, ref in ((dap_loss(c, w).total, dap_ref), (mtf_loss(c, w).total, mtf_ref),
                         (float(dap_loss(tensors, w).total), dap_ref), (float(mtf_loss(tensors, w).total), mtf_ref)):
            worst = max(worst, abs(got - ref))

    corpus = generate(SynthConfig(dialogues=120, turns_mean=5, turns_spread=1, words_mean=6, svo_density=0.5, seed=21))
    small = dict(hidden=32, layers=2, heads=2, ffn=64, max_len=64, max_position=64, batch_size=16, lr=1e-3)
    steps = 15
    dap = run_dap_posttrain(RunConfig(regime="dap-posttrain", lambda2=0, lambda3=0, max_steps=steps, **small),
                            Corpora(corpus))
    ref = _plain_lm_reference(RunConfig(regime="dap-posttrain", **small), corpus, steps)
    got = [(s["mlm"], s["nsp"]) for s in dap.log.steps]
    dap_diff = max(abs(a - b) for g, r in zip(got, ref) for a, b in zip(g, r))
    dap_diff = max([dap_diff] + [abs(s["total"] - (s["mlm"] + s["nsp"])) for s in dap.log.steps])
    dap_zero = all(s["uor"] == 0.0 and s["sbr"] == 0.0 for s in dap.log.steps)

    train, valid = split(corpus, (0.75, 0.25), seed=0)
    mtf = run_mtf(RunConfig(regime="mtf", beta2=0, beta3=0, max_steps=steps, **small), Corpora(train, valid))
    base = run_finetune(RunConfig(regime="baseline-finetune", max_steps=steps, **small), Corpora(train, valid))
    mtf_same = mtf.log.losses() == base.log.losses() and _same_weights(mtf.checkpoint, base.checkpoint)

    ok = worst <= 1e-9 and dap_diff == 0.0 and dap_zero and len(got) == steps and mtf_same
    criterion(2, ok, f"max |total - weighted sum| {worst:.1e} over 1000 draws; lambda2=lambda3=0 vs plain "
                     f"MLM+NSP loop max diff {dap_diff:.1e}; beta2=beta3=0 == baseline: {mtf_same}")
    assert worst <= 1e-9
    assert len(got) == steps and dap_zero and dap_diff == 0.0
    assert mtf_same


# ---------------------------------------------------------------------------
# 3. permutation round trip


def test_c3_permutation_round_trip(criterion):
    words = [f"w{i}" for i in range(40)]
    vocab = build_vocab([words])
    rng = np.random.default_rng(3)
    failures, permuted, skipped = [], 0, 0
    for trial in range(10_000):
        k = int(rng.integers(1, 21))
        delta = float(rng.uniform(0, 1))
        seed = int(rng.integers(2**32))
        lengths = rng.integers(1, 4, k)
        ctx = [Utterance("A", list(rng.choice(words, n)), []) for n in lengths]
        seq = assemble(ctx, ["w0"], vocab, max_len=128)
        out = permute_utterances(seq, delta, seed)
        expected_k = math.floor(k * delta)
        problems = []
        if out.k_prime != expected_k:
            problems.append(f"K'={out.k_prime} vs {expected_k}")
        if expected_k < 2:
            skipped += 1
            if not (out.skipped and out.order_labels == () and np.array_equal(out.seq.ids, seq.ids)):
                problems.append("skip rule")
        else:
            permuted += 1
            if sorted(out.order_labels) != list(range(expected_k)) or out.order_labels == tuple(range(expected_k)):
                problems.append("labels not a non-identity permutation")
            prefix_end = seq.utterance_spans[k - expected_k][0]
            if out.seq.ids[:prefix_end].tobytes() != seq.ids[:prefix_end].tobytes():
                problems.append("prefix changed")
        back = restore_order(out)
        if back.ids.tobytes() != seq.ids.tobytes():
            problems.append("round trip")
        if problems:
            failures.append((trial, k, delta, seed, problems))
    criterion(3, not failures, f"{10_000 - len(failures)}/10000 draws exact ({permuted} permuted, {skipped} skipped)")
    assert not failures, failures[:5]


# ---------------------------------------------------------------------------
# 4. metric oracle


def test_c4_metric_oracle(criterion):
    raw = random_instances(np.random.default_rng(4), 1000)
    multi = sum(sum(y) > 1 for _, y in raw)
    insts = [RankingInstance(str(i), s, y) for i, (s, y) in enumerate(raw)]
    pairs = [(n, k) for n in range(2, 7) for k in range(1, n + 1)]
    rep = compute_report(insts, pairs)
    recall, ap, rr, p1 = brute_metrics(raw, range(1, 7))
    diffs = [abs(rep.recall[f"R{n}@{k}"] - v) for (n, k), v in recall.items()]
    diffs += [abs(rep.map - ap), abs(rep.mrr - rr), abs(rep.p_at_1 - p1)]
    hand_ap = average_precision(RankingInstance("h", [10 - i for i in range(10)], [1, 0, 1] + [0] * 7))
    hand_mrr = mean_reciprocal_rank([RankingInstance("a", [2.0, 1.0], [1, 0]), RankingInstance("b", [2.0, 1.0], [0, 1])])
    ok = max(diffs) <= 1e-9 and hand_ap == (1 + 2 / 3) / 2 and hand_mrr == 0.75
    criterion(4, ok, f"max diff {max(diffs):.1e} over 1000 instances ({multi} multi-positive); "
                     f"AP={hand_ap:.6f}, MRR={hand_mrr}")
    assert max(diffs) <= 1e-9
    assert hand_ap == (1 + 2 / 3) / 2 and hand_mrr == 0.75


# ---------------------------------------------------------------------------
# 5. UOR learnability


def test_c5_uor_learnability(criterion):
    corpus = generate(SynthConfig(dialogues=1200, turns_mean=10, turns_spread=0, words_mean=6, words_spread=0,
                                  cue_strength=1.0, seed=5))
    train, held_out = split(corpus, (5 / 6, 1 / 6), seed=0)
    cfg = RunConfig(regime="dap-posttrain", lambda1=0, lambda2=1, lambda3=0, delta=0.4, lr=1e-3, batch_size=32,
                    max_len=96, max_position=96, max_steps=300, epochs=100, seed=0)
    t = time.perf_counter()
    res = run_dap_posttrain(cfg, Corpora(train))
    seconds = time.perf_counter() - t
    acc = uor_accuracy(res.model, res.vocab, held_out, 0.4, seed=99, max_len=96)
    steps = res.log.steps[-1]["step"]
    k_primes = {r["counts"]["uor"] for r in res.log.steps}
    ok = acc >= 0.8 and steps <= 2000 and seconds < 600
    criterion(5, ok, f"held-out per-slot order accuracy {acc:.3f} (chance 0.25) after {steps} steps, "
                     f"{seconds:.0f}s")
    assert all(k % 4 == 0 for k in k_primes)
    assert acc >= 0.8 and steps <= 2000 and seconds < 600


# ---------------------------------------------------------------------------
# 6. SBR effect


def test_c6_sbr_effect(criterion):
    corpus = generate(SynthConfig(dialogues=1200, turns_mean=6, turns_spread=1, words_mean=8, words_spread=1,
                                  svo_density=1.0, seed=6))
    train, held_out = split(corpus, (5 / 6, 1 / 6), seed=0)
    cfg = RunConfig(regime="dap-posttrain", lr=1e-3, batch_size=32, max_len=96, max_position=96,
                    max_steps=300, epochs=100, seed=0)
    vocab = corpus_vocab(train)
    before = mean_backbone_cosine(DialogueModel(cfg.encoder_config(len(vocab))), vocab, held_out, 96)
    res = run_dap_posttrain(cfg, Corpora(train))
    after = mean_backbone_cosine(res.model, res.vocab, held_out, 96)
    sbr = np.array([s["sbr"] for s in res.log.steps])
    ema = np.empty_like(sbr)
    ema[0] = sbr[0]
    for i in range(1, len(sbr)):
        ema[i] = 0.95 * ema[i - 1] + 0.05 * sbr[i]
    slope = np.polyfit(np.arange(len(ema)), ema, 1)[0]
    ok = after - before >= 0.2 and len(sbr) <= 2000 and ema[-1] < ema[0] and slope < 0
    criterion(6, ok, f"held-out cos {before:.3f} -> {after:.3f} (+{after - before:.3f}); smoothed sbr "
                     f"{ema[0]:.3f} -> {ema[-1]:.3f}, slope {slope:.2e}/step over {len(sbr)} steps")
    assert after - before >= 0.2
    assert ema[-1] < ema[0] and slope < 0


# ---------------------------------------------------------------------------
# 7. downstream trend


SEEDS = range(5)
SYNTH = dict(turns_mean=6, turns_spread=1, words_mean=7, words_spread=1)
SHARED = dict(max_len=80, max_position=80, lr=1e-3, batch_size=32)


def _se(x):
    x = np.asarray(x, float)
    return float(x.std(ddof=1) / math.sqrt(len(x)))


def test_c7_downstream_trend(criterion):
    # a generic pre-trained encoder (MLM + NSP on unrelated synthetic dialogues) plays the role of BERT
    general = generate(SynthConfig(dialogues=8000, seed=999, **SYNTH))
    lm = run_dap_posttrain(RunConfig(regime="dap-posttrain", lambda2=0, lambda3=0, seed=999, **SHARED),
                           Corpora(general)).checkpoint
    rows = {"random": [], "baseline": [], "mtf": [], "dap": []}
    for seed in SEEDS:
        domain = generate(SynthConfig(dialogues=1000, seed=100 + seed, **SYNTH))
        cor = Corpora(*split(domain, (0.8, 0.2), seed))
        rows["random"].append(run_finetune(RunConfig(regime="baseline-finetune", seed=seed, **SHARED), cor)
                              .report.headline())
        rows["baseline"].append(run_finetune(RunConfig(regime="baseline-finetune", seed=seed, **SHARED), cor,
                                             init=lm).report.headline())
        rows["mtf"].append(run_mtf(RunConfig(regime="mtf", seed=seed, **SHARED), cor, init=lm).report.headline())
        post = run_dap_posttrain(RunConfig(regime="dap-posttrain", seed=seed, **SHARED), cor, init=lm)
        rows["dap"].append(run_finetune(RunConfig(regime="dap-finetune", seed=seed, **SHARED), cor,
                                        init=post.checkpoint).report.headline())
    mean = {k: float(np.mean(v)) for k, v in rows.items()}
    dap_gap = np.subtract(rows["dap"], rows["random"])
    mtf_gap = np.subtract(rows["mtf"], rows["baseline"])
    dap_ok = dap_gap.mean() >= -_se(dap_gap)
    mtf_ok = mtf_gap.mean() >= -_se(mtf_gap)
    abs_ok = mean["dap"] >= 0.9 and mean["mtf"] >= 0.9
    summary = ", ".join(f"{k} {mean[k]:.3f}+-{_se(v):.3f}" for k, v in rows.items())
    criterion(7, dap_ok and mtf_ok and abs_ok,
              f"mean best-epoch R2@1 over 5 seeds: {summary}; dap-random {dap_gap.mean():+.3f} "
              f"(SE {_se(dap_gap):.3f}), mtf-baseline {mtf_gap.mean():+.3f} (SE {_se(mtf_gap):.3f})")
    assert dap_ok and mtf_ok
    assert abs_ok, mean


# ---------------------------------------------------------------------------
# 8. delta sweep


def test_c8_delta_sweep(criterion, tmp_path):
    corpus = generate(SynthConfig(dialogues=200, turns_mean=6, turns_spread=1, words_mean=6, svo_density=0.5, seed=8))
    cor = Corpora(*split(corpus, (0.8, 0.2), seed=0))
    cfg = RunConfig(regime="mtf", beta3=0, hidden=32, layers=2, heads=2, ffn=64, max_len=64, max_position=64,
                    batch_size=16, lr=1e-3, epochs=1)
    rows = sweep_delta(cfg, (0.0, 0.2, 0.4, 0.6, 0.8, 1.0), cor, tmp_path / "sweep")
    no_perm = run_mtf(cfg.replace(delta=0.0), cor, tmp_path / "no_perm")
    plain = run_finetune(cfg.replace(regime="baseline-finetune"), cor)
    zero = rows[0]
    sweep_ckpt = (tmp_path / "sweep" / "delta_0.00" / "checkpoint.ckpt").read_bytes()
    same_run = zero.report.to_dict() == no_perm.report.to_dict() and \
        sweep_ckpt == (tmp_path / "no_perm" / "checkpoint.ckpt").read_bytes()
    same_plain = zero.report.to_dict() == plain.report.to_dict() and \
        _same_weights(load_checkpoint(tmp_path / "sweep" / "delta_0.00" / "checkpoint.ckpt"), plain.checkpoint)
    ok = [r.delta for r in rows] == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] and same_run and same_plain
    table = " ".join(f"{r.delta:.1f}:{r.value:.3f}" for r in rows)
    criterion(8, ok, f"R2@1 by delta {table}; delta=0 row bit-identical to no-permutation run: {same_run}, "
                     f"to baseline-finetune: {same_plain}")
    assert len((tmp_path / "sweep" / "sweep.tsv").read_text().splitlines()) == 7
    assert same_run and same_plain


# ---------------------------------------------------------------------------
# 9. determinism and persistence


def test_c9_determinism(criterion, tmp_path):
    corpus = generate(SynthConfig(dialogues=100, turns_mean=6, turns_spread=1, words_mean=6, svo_density=0.5, seed=9))
    cfg = RunConfig(regime="dap-posttrain", hidden=32, layers=2, heads=2, ffn=64, max_len=64, max_position=64,
                    batch_size=16, max_steps=20, epochs=10, checkpoint_every=10)
    a = run_dap_posttrain(cfg, Corpora(corpus), tmp_path / "a")
    b = run_dap_posttrain(cfg, Corpora(corpus), tmp_path / "b")
    logs_equal = a.log.losses()[:10] == b.log.losses()[:10] and a.log.losses() == b.log.losses()

    save_checkpoint(load_checkpoint(tmp_path / "a" / "checkpoint.ckpt"), tmp_path / "again.ckpt")
    bytes_equal = (tmp_path / "a" / "checkpoint.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()

    resumed = run_dap_posttrain(cfg, Corpora(corpus), resume=tmp_path / "a" / "step000010.ckpt")
    keys = ("mlm", "nsp", "uor", "sbr", "total")
    resume_diff = max(abs(r[k] - f[k]) for r, f in zip(resumed.log.steps, a.log.steps[10:]) for k in keys)
    resume_ok = [s["step"] for s in resumed.log.steps] == list(range(11, 21)) and resume_diff <= 1e-9

    train, valid = split(corpus, (0.8, 0.2), seed=0)
    ft = RunConfig(regime="baseline-finetune", hidden=32, layers=2, heads=2, ffn=64, max_len=64, max_position=64,
                   batch_size=16, max_steps=12)
    m1 = run_finetune(ft, Corpora(train, valid)).report.to_dict()
    m2 = run_finetune(ft, Corpora(train, valid)).report.to_dict()
    ok = logs_equal and bytes_equal and resume_ok and m1 == m2
    criterion(9, ok, f"first-10-step logs identical: {logs_equal}; save-load-save byte-identical: {bytes_equal}; "
                     f"resume max diff {resume_diff:.1e}; final metrics identical: {m1 == m2}")
    assert logs_equal and bytes_equal and resume_ok and m1 == m2
