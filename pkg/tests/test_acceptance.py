"""The eight shipped acceptance claims, one test per criterion.

`pytest -v tests/test_acceptance.py` prints one PASSED/FAILED line per
criterion, and the run ends with an "acceptance criteria" summary section
repeating each verdict with its measured numbers.  Criteria 5-7 run real
minutes-scale experiments from scratch; everything is seeded, so reruns
reproduce the same values bit for bit.
"""
import json
import math
import time

import numpy as np
import pytest

from metactc import metatrain, selfcheck, tasks
from metactc import model as model_mod
from metactc.cli import main

PRETRAIN_STEPS = 2000
CURVE_STEPS = (200, 600, 1000, 1400, 2000)
MASTER_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def acc_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def corpus_dir(acc_dir):
    out = acc_dir / "corpora"
    assert main(["generate", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def wallclock():
    # criterion 6's budget covers pretraining plus its own fine-tuning
    return {}


@pytest.fixture(scope="module")
def pretrain_runs(acc_dir, corpus_dir, wallclock):
    """(regime, master seed) -> checkpoint dir; seed 0 keeps every-200 cadence."""
    t0 = time.perf_counter()
    sources = [str(corpus_dir / f"src{i}.jsonl") for i in range(1, 7)]
    runs = {}
    for master in MASTER_SEEDS:
        for regime in metatrain.REGIMES:
            out = acc_dir / f"pre_{regime}_s{master}"
            cadence = 200 if master == 0 else PRETRAIN_STEPS
            rc = main([
                "pretrain", "--regime", regime, "--corpora", *sources,
                "--steps", str(PRETRAIN_STEPS),
                "--checkpoint-every", str(cadence),
                "--seed", str(master), "--out", str(out),
            ])
            assert rc == 0, (regime, master)
            runs[(regime, master)] = out
    wallclock["pretrain"] = time.perf_counter() - t0
    return runs


def test_criterion_1_ctc_oracle_equivalence(record_criterion):
    t0 = time.perf_counter()
    rand = selfcheck.check_ctc_brute_force(n_instances=500, tol=1e-10)
    hand = selfcheck.check_handcrafted_ctc()
    dt = time.perf_counter() - t0
    ok = rand.passed and hand.passed and dt < 10.0
    record_criterion(1, ok, f"{rand.detail}; {hand.detail}; {dt:.1f}s (< 10 s)")
    assert rand.passed, rand.detail
    assert hand.passed, hand.detail
    assert dt < 10.0


def test_criterion_2_gradient_suite(record_criterion):
    t0 = time.perf_counter()
    lattice = selfcheck.check_lattice_gradients(n_instances=20, tol=1e-6)
    layers = selfcheck.check_layer_gradients(instances_per_kind=20, tol=1e-6)
    end2end = selfcheck.check_end_to_end_gradients(n_instances=20, tol=1e-5)
    dt = time.perf_counter() - t0
    ok = lattice.passed and layers.passed and end2end.passed and dt < 60.0
    record_criterion(
        2,
        ok,
        f"{lattice.detail}; {layers.detail}; {end2end.detail}; {dt:.1f}s (< 60 s)",
    )
    for result in (lattice, layers, end2end):
        assert result.passed, result.detail
    assert dt < 60.0


def test_criterion_3_fomaml_consistency(record_criterion):
    zero = selfcheck.check_meta_grad_zero_inner_lr(tol=1e-12)
    halves = selfcheck.check_meta_grad_error_halves(n_seeds=10, slack=1.5)
    scalar = selfcheck.check_scalar_meta_closed_form(tol=1e-9)
    ok = zero.passed and halves.passed and scalar.passed
    record_criterion(3, ok, f"{zero.detail}; {halves.detail}; {scalar.detail}")
    for result in (zero, halves, scalar):
        assert result.passed, result.detail


def test_criterion_4_decoder_exactness(record_criterion):
    exact = selfcheck.check_beam_exact()
    greedy = selfcheck.check_beam_one_matches_greedy(n_instances=100)
    ok = exact.passed and greedy.passed
    record_criterion(4, ok, f"{exact.detail}; {greedy.detail}")
    assert exact.passed, exact.detail
    assert greedy.passed, greedy.detail


def test_criterion_5_monolingual_learnability(record_criterion):
    t0 = time.perf_counter()
    cfg = tasks.default_family_config(noise_sigma=0.0)
    lang = tasks.generate_family(cfg)[0]
    start = model_mod.init_model(
        model_mod.default_encoder_config(feature_dim=cfg.feature_dim), {}, 0
    )
    start = model_mod.ensure_head(start, lang.language_id, lang.alphabet, 0)
    result = metatrain.finetune(
        start, lang, metatrain.FinetuneConfig(epochs=6, seed=0),
        split="full", track_cer=True,
    )
    cers = [s.val_cer for s in result.history]
    best = min(cers)
    reached = next((i + 1 for i, c in enumerate(cers) if c < 5.0), None)
    dt = time.perf_counter() - t0
    ok = reached is not None and reached <= 300 and dt < 300.0
    record_criterion(
        5,
        ok,
        f"noiseless test CER {best:.2f}, first < 5 at epoch {reached} (<= 300); "
        f"{dt:.0f}s (< 5 min)",
    )
    assert reached is not None, cers
    assert dt < 300.0


def _transfer_mean_cer(base_model, targets, master: int) -> float:
    cers = []
    for task in targets:
        candidate = model_mod.ensure_head(
            base_model, task.language_id, task.alphabet, master
        )
        tuned = metatrain.finetune(
            candidate, task, metatrain.FinetuneConfig(seed=master), split="limited"
        )
        value, _ = metatrain.evaluate_task(tuned.model, task, split="test", beam=1)
        cers.append(value)
    return float(np.mean(cers))


def test_criterion_6_transfer_trend(
    record_criterion, corpus_dir, pretrain_runs, wallclock
):
    t0 = time.perf_counter()
    targets = [tasks.load_corpus(str(corpus_dir / f"tgt{i}.jsonl")) for i in range(1, 5)]
    mean_cer = {}
    for master in MASTER_SEEDS:
        for regime in metatrain.REGIMES:
            base, _ = model_mod.load_model(
                str(pretrain_runs[(regime, master)] / f"checkpoint_{PRETRAIN_STEPS:06d}")
            )
            mean_cer[(regime, master)] = _transfer_mean_cer(base, targets, master)
        fresh = model_mod.init_model(
            model_mod.default_encoder_config(feature_dim=targets[0].full_split[0].features.shape[1]),
            {},
            master,
        )
        mean_cer[("none", master)] = _transfer_mean_cer(fresh, targets, master)

    agg = {
        kind: float(np.mean([mean_cer[(kind, s)] for s in MASTER_SEEDS]))
        for kind in ("meta", "multi", "none")
    }
    strict = all(mean_cer[("meta", s)] < mean_cer[("none", s)] for s in MASTER_SEEDS)
    total = wallclock.get("pretrain", 0.0) + (time.perf_counter() - t0)
    ok = (
        agg["meta"] <= agg["multi"] <= agg["none"]
        and strict
        and total < 1800.0
    )
    record_criterion(
        6,
        ok,
        f"mean target CER meta {agg['meta']:.2f} <= multi {agg['multi']:.2f} "
        f"<= none {agg['none']:.2f}; meta < none in all seeds: {strict}; "
        f"{total:.0f}s incl. pretraining (< 30 min)",
    )
    assert agg["meta"] <= agg["multi"] <= agg["none"], (agg, mean_cer)
    assert strict, mean_cer
    assert total < 1800.0


def _curve_points(out_dir) -> list[tuple[int, float]]:
    rows = []
    with open(out_dir / "curve.csv", encoding="utf-8") as fh:
        assert next(fh).strip() == "kind,pretrain_step,best_val_cer"
        for line in fh:
            kind, step, value = line.strip().split(",")
            if kind == "checkpoint":
                rows.append((int(step), float(value)))
    return sorted(rows)


def test_criterion_7_curve_shape(record_criterion, acc_dir, corpus_dir, pretrain_runs):
    target = str(corpus_dir / "tgt1.jsonl")
    steps_arg = ",".join(str(s) for s in CURVE_STEPS)
    points = {}
    for regime in metatrain.REGIMES:
        out = acc_dir / f"curve_{regime}"
        rc = main([
            "curve", "--corpus", target,
            "--checkpoints", str(pretrain_runs[(regime, 0)]),
            "--steps", steps_arg, "--seed", "0", "--out", str(out),
        ])
        assert rc == 0, regime
        points[regime] = _curve_points(out)
        assert [s for s, _ in points[regime]] == list(CURVE_STEPS)

    meta = points["meta"]
    multi = points["multi"]
    meta_ok = meta[-1][1] <= meta[0][1]
    # reported, not asserted: does multitask transfer peak early then slip?
    best_step, best = min(multi, key=lambda p: (p[1], p[0]))
    degraded = multi[-1][1] > best and best_step < CURVE_STEPS[-1]
    record_criterion(
        7,
        meta_ok,
        f"meta curve first {meta[0][1]:.2f} -> final {meta[-1][1]:.2f} (final <= first); "
        f"multi best {best:.2f} at step {best_step}, final {multi[-1][1]:.2f} "
        f"-> late degradation {'observed' if degraded else 'not observed'} (reported only)",
    )
    print(
        f"multi transfer curve: best {best:.2f} at step {best_step}, "
        f"final {multi[-1][1]:.2f}; late-stage degradation "
        f"{'observed' if degraded else 'not observed'}"
    )
    assert meta_ok, meta


TINY_FAMILY = {
    "schema_version": 1,
    "n_languages": 2,
    "alphabet_sizes": [3, 4],
    "feature_dim": 6,
    "shared_pool_size": 5,
    "duration_range": [2, 3],
    "length_range": [2, 4],
    "noise_sigma": 0.2,
    "utterances_per_language": 12,
    "test_utterances": 4,
    "subsample_stride": 2,
    "limited_fraction": 0.25,
    "seed": 5,
    "language_ids": ["redd", "blue"],
}

LOG_HEADER = "step,regime,task_id,task_loss,meta_loss,elapsed_seconds"


def _assert_same_artifacts(a, b) -> int:
    """Byte-compare two output dirs; only wall-clock columns are exempt."""
    names_a = sorted(p.name for p in a.iterdir())
    names_b = sorted(p.name for p in b.iterdir())
    assert names_a == names_b
    compared = 0
    for name in names_a:
        fa = (a / name).read_bytes()
        fb = (b / name).read_bytes()
        if name == "train_log.csv":
            la = fa.decode("utf-8").splitlines()
            lb = fb.decode("utf-8").splitlines()
            assert la[0] == lb[0] == LOG_HEADER
            for ra, rb in zip(la[1:], lb[1:], strict=True):
                body_a, elapsed_a = ra.rsplit(",", 1)
                body_b, elapsed_b = rb.rsplit(",", 1)
                assert body_a == body_b
                assert math.isfinite(float(elapsed_a))
                assert math.isfinite(float(elapsed_b))
        else:
            assert fa == fb, f"{name} differs between reruns"
        compared += 1
    return compared


def test_criterion_8_determinism(record_criterion, tmp_path):
    fam_cfg = tmp_path / "family.json"
    fam_cfg.write_text(json.dumps(TINY_FAMILY))
    compared = 0

    def twice(argv_fn):
        nonlocal compared
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{argv_fn.__name__}_{tag}"
            assert main(argv_fn(str(out))) == 0, argv_fn.__name__
            outs.append(out)
        compared += _assert_same_artifacts(*outs)
        return outs[0]

    def generate(out):
        return ["generate", "--config", str(fam_cfg), "--out", out]

    corpora = twice(generate)
    sources = [str(corpora / "redd.jsonl"), str(corpora / "blue.jsonl")]

    def pretrain_meta(out):
        return ["pretrain", "--regime", "meta", "--corpora", *sources,
                "--steps", "4", "--checkpoint-every", "2", "--seed", "3", "--out", out]

    def pretrain_multi(out):
        return ["pretrain", "--regime", "multi", "--corpora", *sources,
                "--steps", "4", "--checkpoint-every", "2", "--seed", "3", "--out", out]

    pre = twice(pretrain_meta)
    twice(pretrain_multi)
    ckpt = str(pre / "checkpoint_000004")

    def finetune(out):
        return ["finetune", "--corpus", sources[0], "--checkpoint", ckpt,
                "--split", "limited", "--epochs", "2", "--seed", "3", "--out", out]

    tuned = twice(finetune)

    def evaluate(out):
        return ["evaluate", "--corpus", sources[0],
                "--checkpoint", str(tuned / "finetuned_redd"),
                "--split", "test", "--beam", "4", "--seed", "3", "--out", out]

    twice(evaluate)

    def curve(out):
        return ["curve", "--corpus", sources[1], "--checkpoints", str(pre),
                "--epochs", "2", "--seed", "3", "--out", out]

    twice(curve)

    def check(out):
        return ["selfcheck", "--out", out]

    twice(check)

    record_criterion(
        8,
        True,
        f"all 6 commands rerun byte-identically ({compared} artifacts compared; "
        "only the wall-clock log column is exempt)",
    )
