"""Acceptance gate: eleven numbered end-to-end criteria.

Each test carries @pytest.mark.acceptance(num, name); the terminal summary
prints one PASS/FAIL line per criterion. Tolerances and time budgets are
asserted inside the tests themselves.
"""

import time

import numpy as np
import pytest

from slidemil import autodiff as ad
from slidemil import bagio, evalx, runner
from slidemil.attnmil import ClamConfig, ClamModel, smooth_svm_loss
from slidemil.bagio import SyntheticSpec
from slidemil.train import BalancedSampler, EarlyStopper, TrainConfig, train_model
from slidemil.transmil import TransmilConfig, TransmilModel, nystrom_attention

# --- criterion 1: Nystrom attention matches exact attention -----------------


def _exact_attention(q, k, v):
    scale = 1.0 / np.sqrt(q.shape[-1])
    logits = (q * scale) @ np.swapaxes(k, -1, -2)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v


@pytest.mark.acceptance(num=1, name="nystrom exactness at full landmarks")
def test_nystrom_full_landmarks_matches_exact_attention():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    q, k, v = (rng.standard_normal((8, 64, 8)) for _ in range(3))
    approx = nystrom_attention(q, k, v, num_landmarks=64, pinv_iterations=24)
    exact = _exact_attention(q, k, v)
    err = float(np.max(np.abs(approx - exact)))
    elapsed = time.perf_counter() - t0
    assert err <= 1e-4, f"max abs error {err:.3e} > 1e-4"
    assert elapsed < 10.0, f"took {elapsed:.1f}s"


# --- criterion 2: analytic gradients vs finite differences ------------------


@pytest.mark.acceptance(num=2, name="gradient checks on small bags")
def test_gradient_checks_small_bags():
    t0 = time.perf_counter()
    for mode in ("SB", "MB"):
        cfg = ClamConfig(input_dim=6, num_classes=3, branch_mode=mode,
                         embed_dim=8, attn_hidden=4, instances_per_side=1,
                         dropout=0.0)
        model = ClamModel(cfg, rng=np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((4, 6))

        def clam_loss_fn():
            total, _, _ = model.loss(model.forward(x), label=1)
            return total

        err = ad.gradient_max_rel_error(clam_loss_fn, model.params)
        assert err <= 1e-4, f"CLAM-{mode} gradient error {err:.2e} > 1e-4"

    tcfg = TransmilConfig(input_dim=5, num_classes=3, model_dim=8,
                          num_heads=2, num_landmarks=2, pinv_iterations=6,
                          dropout=0.0)
    tmodel = TransmilModel(tcfg, rng=np.random.default_rng(2))
    tx = np.random.default_rng(3).standard_normal((5, 5))

    def transmil_loss_fn():
        total, _, _ = tmodel.loss(tmodel.forward(tx), label=2)
        return total

    err = ad.gradient_max_rel_error(transmil_loss_fn, tmodel.params)
    elapsed = time.perf_counter() - t0
    assert err <= 1e-3, f"TransMIL gradient error {err:.2e} > 1e-3"
    assert elapsed < 60.0, f"took {elapsed:.1f}s"


# --- criterion 3: smooth SVM closed forms ------------------------------------


@pytest.mark.acceptance(num=3, name="smooth SVM closed-form values")
def test_smooth_svm_closed_forms():
    # tied scores: ln(1 + e); winning by the margin: ln(1 + 1/e);
    # winning by a wide gap: ln(1 + e^-9)
    assert smooth_svm_loss([[0.0, 0.0]], [0]) == pytest.approx(1.31326,
                                                               abs=1e-5)
    assert smooth_svm_loss([[2.0, 0.0]], [0]) == pytest.approx(0.31326,
                                                               abs=1e-5)
    assert smooth_svm_loss([[10.0, 0.0]], [0]) == pytest.approx(1.234e-4,
                                                                abs=1e-5)


# --- criteria 4 and 5: planted-signal end to end -----------------------------


_E2E_OVERRIDES = {
    "clam_sb": {"embed_dim": 128, "attn_hidden": 64},
    "transmil": {"model_dim": 128, "num_heads": 4, "num_landmarks": 16},
}
_E2E_TRAIN = {
    "clam_sb": dict(max_epochs=20, min_epochs=8, patience=6,
                    learning_rate=1e-3, model_seed=0),
    "transmil": dict(max_epochs=40, min_epochs=15, patience=10,
                     learning_rate=1e-3, model_seed=0),
}


@pytest.fixture(scope="module")
def planted_signal_runs():
    """Train CLAM-SB and TransMIL on planted-signal bags over 5 data seeds."""
    t0 = time.perf_counter()
    spec = SyntheticSpec(num_classes=3, bags_per_class=60,
                         instances_per_bag=(40, 60), feature_dim=64,
                         signal_fraction=0.05, signal_separation=6.0,
                         noise_sigma=1.0, seed=2024)
    index, bags, masks = bagio.generate_synthetic(spec)
    labels = index.labels()
    results = {"clam_sb": [], "transmil": []}
    recalls = []
    for family in ("clam_sb", "transmil"):
        config = runner._model_config(family, spec.feature_dim,
                                      spec.num_classes, _E2E_OVERRIDES)
        for data_seed in range(5):
            split = bagio.make_split(index, data_seed)
            model, _ = train_model(family, config, bags, labels, split,
                                   TrainConfig(**_E2E_TRAIN[family]))
            records = runner.evaluate_model(model, bags, labels, split.test)
            metrics = evalx.run_metrics(records, data_seed=data_seed,
                                        model_seed=0, model=family,
                                        encoder_id="synthetic")
            results[family].append(metrics)
            if family == "clam_sb":
                for sid in split.test:
                    attn = runner.attention_values(model, bags[sid].features)
                    top8 = set(np.argsort(-attn, kind="stable")[:8].tolist())
                    signal = set(np.nonzero(masks[sid])[0].tolist())
                    recalls.append(len(top8 & signal) / len(signal))
    return {"results": results, "recalls": recalls,
            "elapsed": time.perf_counter() - t0}


@pytest.mark.acceptance(num=4, name="planted-signal end-to-end learning")
def test_planted_signal_end_to_end(planted_signal_runs):
    for family in ("clam_sb", "transmil"):
        per_seed = planted_signal_runs["results"][family]
        assert len(per_seed) == 5
        good = sum(1 for m in per_seed
                   if m.accuracy >= 0.95 and m.auc >= 0.98)
        detail = [(m.data_seed, round(m.accuracy, 3), round(m.auc, 4))
                  for m in per_seed]
        assert good >= 4, f"{family}: only {good}/5 seeds passed: {detail}"
    elapsed = planted_signal_runs["elapsed"]
    assert elapsed < 900.0, f"training took {elapsed:.0f}s (budget 900s)"


@pytest.mark.acceptance(num=5, name="attention localizes planted signal")
def test_attention_recall_of_planted_signal(planted_signal_runs):
    recalls = planted_signal_runs["recalls"]
    assert len(recalls) > 0
    mean_recall = float(np.mean(recalls))
    assert mean_recall >= 0.8, f"mean top-8 recall {mean_recall:.3f} < 0.8"


# --- criterion 6: seed protocol and byte-stable sweeps ------------------------


@pytest.mark.acceptance(num=6, name="5x3 seed sweep, byte-identical reruns")
def test_seed_sweep_shape_and_byte_identity(tmp_path, monkeypatch):
    monkeypatch.delenv(runner.DETERMINISTIC_ENV_VAR, raising=False)
    assert runner.deterministic_mode()
    spec = SyntheticSpec(num_classes=2, bags_per_class=30,
                         instances_per_bag=(8, 14), feature_dim=8,
                         signal_fraction=0.25, signal_separation=5.0,
                         noise_sigma=1.0, seed=77)
    index, bags, masks = bagio.generate_synthetic(spec)
    bagio.write_synthetic_dataset(str(tmp_path / "data"), index, bags, masks)

    def sweep(out_name):
        plan = runner.ExperimentPlan(
            dataset=str(tmp_path / "data" / "dataset.json"),
            output_dir=str(tmp_path / out_name),
            models=["clam_sb"], encoders=["synthetic"],
            data_seeds=[0, 1, 2, 3, 4], model_seeds=[0, 1, 2],
            model_overrides={"clam_sb": {"embed_dim": 16, "attn_hidden": 8,
                                         "instances_per_side": 2,
                                         "dropout": 0.0}},
            train={"max_epochs": 2, "min_epochs": 1, "patience": 5,
                   "learning_rate": 3e-3})
        return runner.run_sweep(plan)

    report_a = sweep("out_a")
    report_b = sweep("out_b")

    assert len(report_a.runs) == 15  # |data seeds| x |model seeds|
    summary = report_a.aggregate[("clam_sb", "synthetic")]
    assert summary["accuracy"].n == 15
    table = (tmp_path / "out_a" / "aggregate.txt").read_text()
    assert "(±" in table

    for name in ("results.csv", "aggregate.csv", "aggregate.txt",
                 "report.json"):
        a = (tmp_path / "out_a" / name).read_bytes()
        b = (tmp_path / "out_b" / name).read_bytes()
        assert a == b, f"{name} differs between identical sweeps"
    assert len((tmp_path / "out_a" / "results.csv").read_text()
               .splitlines()) == 16  # header + 15 rows


# --- criterion 7: balanced sampler statistics ---------------------------------


@pytest.mark.acceptance(num=7, name="class-balanced sampler frequency")
def test_sampler_minority_frequency():
    labels = np.array([0] * 900 + [1] * 100)
    sampler = BalancedSampler(labels)
    draws = sampler.draw_epoch(np.random.default_rng(123), size=100_000)
    freq = float(np.mean(labels[draws] == 1))
    assert abs(freq - 0.5) <= 0.02, f"minority frequency {freq:.4f}"


# --- criterion 8: patient-disjoint splits --------------------------------------


@pytest.mark.acceptance(num=8, name="patient disjointness over 1000 splits")
def test_patient_disjointness_thousand_splits():
    leaks = 0
    fraction_violations = 0
    for trial in range(1000):
        rng = np.random.default_rng(5000 + trial)
        while True:
            n_patients = int(rng.integers(40, 91))
            spp = rng.integers(1, 4, size=n_patients)
            # keep the worst-case train overshoot (max slides of one
            # patient / total) within the +-5 point tolerance
            if spp.sum() >= 20 * spp.max():
                break
        records = [{"slide_id": f"p{p:03d}s{s}", "patient_id": f"p{p:03d}",
                    "class_name": "ab"[(p + s) % 2]}
                   for p in range(n_patients) for s in range(int(spp[p]))]
        index = bagio.index_from_records(records)
        split = bagio.make_split(index, data_seed=trial)

        patients = [{index.get(sid).patient_id for sid in part}
                    for part in (split.train, split.val, split.test)]
        for i in range(3):
            for j in range(i + 1, 3):
                if patients[i] & patients[j]:
                    leaks += 1
        total = len(split.train) + len(split.val) + len(split.test)
        if abs(len(split.train) / total - 0.70) > 0.05:
            fraction_violations += 1
    assert leaks == 0, f"{leaks} patient leaks"
    assert fraction_violations == 0, f"{fraction_violations} fraction misses"


# --- criterion 9: AUC equals the pair-counting oracle ---------------------------


def _pair_count_auc(scores, positives):
    pos = scores[positives]
    neg = scores[~positives]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (pos.size * neg.size)


@pytest.mark.acceptance(num=9, name="AUC equals pair-counting oracle")
def test_auc_exact_against_oracle():
    rng = np.random.default_rng(99)
    for _ in range(200):
        n_classes = int(rng.integers(2, 5))
        n = int(rng.integers(n_classes + 1, 26))
        labels = rng.integers(0, n_classes, size=n)
        labels[:n_classes] = np.arange(n_classes)  # every class present
        probs = rng.integers(0, 5, size=(n, n_classes)) / 4.0  # forces ties
        records = [evalx.PredictionRecord(slide_id=str(i), label=int(y),
                                          probabilities=p)
                   for i, (y, p) in enumerate(zip(labels, probs))]
        oracle = float(np.mean([_pair_count_auc(probs[:, c], labels == c)
                                for c in range(n_classes)]))
        assert evalx.auc(records) == oracle  # exact, not approximate


# --- criterion 10: feature-bag format stability ---------------------------------


@pytest.mark.acceptance(num=10, name="bag format roundtrip and golden file")
def test_bag_format_roundtrip_and_golden(tmp_path, golden_bag_path):
    rng = np.random.default_rng(7)
    for i in range(100):
        n = int(rng.integers(1, 51))
        d = int(rng.integers(1, 33))
        features = rng.standard_normal((n, d)).astype(np.float32)
        slide_id = f"slide_{i:03d}" if i % 3 else f"slide_µ_{i:03d}"
        bag = bagio.FeatureBag(slide_id=slide_id,
                               encoder_id=f"enc-{i % 5}", features=features)
        path = tmp_path / f"bag{i}.milfb"
        bagio.write_feature_bag(bag, str(path))
        back = bagio.read_feature_bag(str(path))
        assert back.slide_id == bag.slide_id
        assert back.encoder_id == bag.encoder_id
        assert back.features.dtype == np.float32
        assert np.array_equal(back.features, bag.features)

    golden = bagio.read_feature_bag(str(golden_bag_path))
    assert golden.slide_id == "golden_slide"
    assert golden.encoder_id == "golden-enc"
    expected = np.array([[0.0, 1.0, -1.0, 0.5],
                         [3.25, -2.75, 1e-3, 65504.0],
                         [-0.125, 7.0, -3.5, 2.0]], dtype=np.float32)
    assert np.array_equal(golden.features, expected)
    # re-encoding the decoded bag must reproduce the file byte for byte
    out = tmp_path / "golden_again.milfb"
    bagio.write_feature_bag(golden, str(out))
    assert out.read_bytes() == golden_bag_path.read_bytes()


@pytest.fixture
def golden_bag_path(request):
    import pathlib
    return pathlib.Path(request.config.rootpath) / "tests" / "data" / \
        "golden.milfb"


# --- criterion 11: early-stopping contract ---------------------------------------


def _run_to_stop(losses, **kwargs):
    """Drive EarlyStopper over scripted losses; return (stop, last_improve)."""
    stopper = EarlyStopper(**kwargs)
    last_improve = 0
    for epoch, loss in enumerate(losses, start=1):
        improved, stop = stopper.update(epoch, loss)
        if improved:
            last_improve = epoch
        if stop:
            return epoch, last_improve
    raise AssertionError("scripted sequence too short to trigger a stop")


@pytest.mark.acceptance(num=11, name="early-stopping contract")
def test_early_stopping_contract():
    kwargs = dict(min_epochs=50, patience=20, max_epochs=200)

    # always improving: runs to the max-epoch cap, never beyond
    always = [1.0 - 0.001 * e for e in range(250)]
    stop, last = _run_to_stop(always, **kwargs)
    assert stop == 200 and last == 200

    # last improvement at epoch 60: stops exactly patience epochs later
    plateau_60 = [1.0 - 0.01 * min(e, 60) for e in range(1, 251)]
    stop, last = _run_to_stop(plateau_60, **kwargs)
    assert (stop, last) == (80, 60)

    # improvement dies at epoch 10: the min-epoch floor delays the stop to 50
    plateau_10 = [1.0 - 0.01 * min(e, 10) for e in range(1, 251)]
    stop, last = _run_to_stop(plateau_10, **kwargs)
    assert (stop, last) == (50, 10)

    # last improvement at 45: 45 + 20 = 65 is past the floor, stop there
    plateau_45 = [1.0 - 0.01 * min(e, 45) for e in range(1, 251)]
    stop, last = _run_to_stop(plateau_45, **kwargs)
    assert (stop, last) == (65, 45)

    # fuzz: the stop epoch always equals the closed-form contract
    rng = np.random.default_rng(17)
    for _ in range(100):
        losses = rng.random(220).tolist()
        stop, last = _run_to_stop(losses, **kwargs)
        best = np.inf
        last_improve = 0
        want = 200
        for epoch, loss in enumerate(losses[:200], start=1):
            if loss < best:
                best, last_improve = loss, epoch
            if epoch >= 50 and epoch - last_improve >= 20:
                want = epoch
                break
        assert stop == want
        assert stop >= 50
        assert stop <= 200
