import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cnpoison import datagen as dg, evaluation as ev
from cnpoison.imaging import default_target


@pytest.fixture(scope="module")
def corpus():
    return dg.gen_shapes_corpus(n=300, n_val=10, n_test=60)


@pytest.fixture(scope="module")
def detector(corpus):
    return ev.train_detector(np.stack([r.image for r in corpus.train]), default_target(), seed=0)


@pytest.fixture(scope="module")
def held_out(corpus):
    return np.stack([r.image for r in corpus.test])


# ----------------------------------------------------------------- detector
def test_target_scores_above_gate(detector):
    assert ev.detector_score(detector, default_target()) > 0.99


def test_held_out_clean_mean_score_below_gate(detector, held_out):
    assert detector.score(held_out).mean() < 0.05


def test_blank_image_is_not_target(detector):
    assert ev.detector_score(detector, np.zeros((32, 32))) < 0.5


def test_scores_are_probabilities_and_repeatable(detector, held_out):
    s = detector.score(held_out)
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_array_equal(s, detector.score(held_out))


def test_same_seed_and_data_give_same_digest(corpus, detector):
    again = ev.train_detector(np.stack([r.image for r in corpus.train]), default_target(), seed=0)
    assert again.digest() == detector.digest()


def test_trained_detector_is_frozen(detector):
    assert not any(p.requires_grad for p in detector.parameters())


def test_too_few_negatives_rejected():
    with pytest.raises(ValueError, match="100"):
        ev.train_detector(np.zeros((99, 32, 32)), default_target())


def test_resolution_mismatch_rejected(detector):
    with pytest.raises(ValueError, match="32x32"):
        detector.score(np.zeros((16, 16)))
    with pytest.raises(ValueError):
        ev.embed_similarity(detector, np.zeros((32, 32)), np.zeros((16, 16)))


def test_degraded_target_still_detected(detector):
    rng = np.random.default_rng(11)
    assert (detector.score(ev.augment_target(default_target(), rng, 50)) > ev.TAU_C).mean() >= 0.9


def test_noise_textures_are_not_target(detector):
    rng = np.random.default_rng(12)
    tex = np.stack([ev.noise_texture(rng, (32, 32)) for _ in range(50)])
    assert (detector.score(tex) > ev.TAU_C).mean() <= 0.05


def test_augmented_positives_stay_in_range():
    out = ev.augment_target(default_target(), np.random.default_rng(0), 20)
    assert out.shape == (20, 32, 32) and out.min() >= 0 and out.max() <= 1


# ---------------------------------------------------------------- embedding
def test_embeddings_are_unit_norm(detector, held_out):
    np.testing.assert_allclose(np.linalg.norm(detector.embed(held_out), axis=1), 1.0, atol=1e-6)


def test_self_similarity_is_one(detector, held_out):
    assert ev.embed_similarity(detector, held_out[0], held_out[0]) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("i,j", [(0, 1), (3, 7), (10, 20)])
def test_similarity_is_symmetric(detector, held_out, i, j):
    assert ev.embed_similarity(detector, held_out[i], held_out[j]) == ev.embed_similarity(detector, held_out[j], held_out[i])


def test_target_closer_to_itself_than_to_clean(detector, held_out):
    t = default_target()
    self_sim = ev.embed_similarity(detector, t, t)
    assert all(ev.embed_similarity(detector, t, x) < self_sim for x in held_out[:20])
    assert ev.similarities_to(detector, held_out, t).max() < ev.TAU_S


# ---------------------------------------------------------------------- ASR
def test_definition_arithmetic_example():
    assert ev.asr_from_scores([0.9, 0.9, 0.5, 0.9], [0.9, 0.5, 0.9, 0.8]) == 0.5


def test_threshold_is_strict():
    assert ev.asr_from_scores([0.7], [0.9]) == 0.0


def test_samples_equal_to_target_pass(detector):
    out = ev.compute_asr(np.stack([default_target()] * 5), detector, default_target())
    assert out["asr"] == 1.0 and out["passed"].all()


def test_clean_images_fail(detector, held_out):
    assert ev.compute_asr(held_out, detector, default_target())["asr"] == 0.0


def test_empty_sample_set_rejected(detector):
    with pytest.raises(ValueError, match="empty"):
        ev.compute_asr(np.zeros((0, 32, 32)), detector, default_target())
    with pytest.raises(ValueError, match="empty"):
        ev.asr_from_scores([], [])


@pytest.mark.parametrize("taus", [(0.0, 0.7), (0.7, 1.0), (1.2, 0.5)])
def test_threshold_outside_unit_interval_rejected(detector, taus):
    with pytest.raises(ValueError, match="tau"):
        ev.compute_asr(np.stack([default_target()]), detector, default_target(), *taus)


unit = st.floats(0, 1, allow_nan=False)
pairs = st.lists(st.tuples(unit, unit), min_size=1, max_size=40)


@settings(max_examples=80, deadline=None)
@given(pairs, st.floats(0.01, 0.98), st.floats(0.01, 0.98), st.floats(0, 0.5), st.floats(0, 0.5))
def test_raising_thresholds_never_raises_asr(ps, tc, ts, dc, ds):
    s, m = zip(*ps)
    assert ev.asr_from_scores(s, m, min(tc + dc, 0.99), min(ts + ds, 0.99)) <= ev.asr_from_scores(s, m, tc, ts)


@settings(max_examples=80, deadline=None)
@given(pairs)
def test_duplicating_samples_keeps_asr(ps):
    s, m = zip(*ps)
    assert ev.asr_from_scores(s + s, m + m) == ev.asr_from_scores(s, m)


def test_asr_is_passing_over_total(detector, held_out):
    mixed = np.concatenate([held_out[:6], np.stack([default_target()] * 2)])
    out = ev.compute_asr(mixed, detector, default_target())
    assert out["asr"] == out["passed"].sum() / len(mixed) == 0.25


# ------------------------------------------------------------------ quality
def test_identical_sets_have_perfect_quality(detector, held_out):
    q = ev.quality_report(held_out[:5], held_out[:5], detector)["summary"]
    assert q["mse_mean"] == 0.0
    assert q["ssim_mean"] == pytest.approx(1.0, abs=1e-9)
    assert q["similarity_mean"] == pytest.approx(1.0, abs=1e-6)
    assert q["psnr_mean"] == float("inf")


def test_quality_means_match_hand_average(detector, held_out):
    rng = np.random.default_rng(0)
    gens = np.clip(held_out[:8] + rng.normal(0, 0.1, held_out[:8].shape), 0, 1)
    q = ev.quality_report(gens, held_out[:8], detector)
    for key in ("mse", "ssim", "psnr", "similarity"):
        vals = q["per_sample"][key]
        assert q["summary"][f"{key}_mean"] == pytest.approx(sum(vals) / len(vals), abs=1e-12)
        assert q["summary"][f"{key}_std"] == pytest.approx(np.std(vals), abs=1e-12)


def test_quality_without_detector_omits_similarity(held_out):
    assert "similarity" not in ev.quality_report(held_out[:2], held_out[2:4])["per_sample"]


def test_quality_length_mismatch_rejected(held_out):
    with pytest.raises(ValueError, match="3 generations vs 2"):
        ev.quality_report(held_out[:3], held_out[:2])


# ------------------------------------------------------------------- report
def _report():
    rng = np.random.default_rng(5)
    rows = []
    for which in ("clean", "triggered"):
        for i in range(4):
            sc, sim = rng.random(), rng.random()
            rows.append({"set": which, "index": i, "detector_score": sc, "similarity": sim,
                         "pass": bool(sc > 0.7 and sim > 0.7), "mse": rng.random() / 10, "ssim": rng.random(),
                         "psnr": 10 + 20 * rng.random(), "ref_similarity": rng.random()})
    r = ev.EvalReport(asr=0.0, rows=rows, config={"poison.fraction": 0.05, "sampler.steps": 50})
    r.summary = r.recompute_summary()
    r.asr = r.summary["triggered.asr"]
    return r


def test_report_summary_consistent_with_rows():
    r = _report()
    trig = [row for row in r.rows if row["set"] == "triggered"]
    assert r.asr == sum(row["pass"] for row in trig) / len(trig)
    assert r.summary["clean.ssim_mean"] == pytest.approx(np.mean([row["ssim"] for row in r.rows[:4]]), abs=1e-12)


def test_report_text_round_trip():
    r = _report()
    back = ev.EvalReport.from_text(r.to_text())
    assert back.asr == r.asr
    assert back.rows == r.rows
    assert back.summary == pytest.approx(r.summary, abs=1e-12)
    for k, v in back.recompute_summary().items():
        assert v == pytest.approx(back.summary[k], abs=1e-9)
    assert back.config == {"poison.fraction": "0.05", "sampler.steps": "50"}


def test_report_csv_has_one_row_per_sample():
    lines = _report().to_csv().splitlines()
    assert lines[0].split(",") == list(ev.EvalReport.COLUMNS)
    assert len(lines) == 9


def test_perceptual_slot_defaults_to_none():
    assert "perceptual: none" in _report().to_text()
