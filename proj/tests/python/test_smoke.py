import json
from itertools import product

import numpy as np
import pytest

import texroi


def test_lbp_matches_definition_on_a_single_bright_neighbor():
    img = np.zeros((9, 9))
    img[4, 6] = 1.0  # row 4, column 6: neighbor 0 of center (4, 4) at radius 2
    assert texroi.lbp_code(img, 4, 4) == 255  # >= rule: ties with the dark center set every bit
    img[4, 4] = 0.5
    assert texroi.lbp_code(img, 4, 4) == 1


def test_lbp_histogram_is_normalized_and_gray_scale_invariant():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 255, size=(20, 24))
    h = np.array(texroi.lbp_histogram(img))
    assert h.shape == (256,)
    assert h.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(h, texroi.lbp_histogram(3.5 * img + 17.0))
    counts = texroi.lbp_histogram(img, normalize=False)
    assert sum(counts) == (20 - 6) * (24 - 6)


def test_metrics_against_pair_counting():
    rng = np.random.default_rng(1)
    s = rng.integers(0, 5, 40) / 4.0
    y = (rng.uniform(size=40) < 0.4).astype(int)
    y[:2] = [0, 1]
    pos, neg = s[y == 1], s[y == 0]
    pairs = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in product(pos, neg))
    assert texroi.roc_auc(s.tolist(), y.tolist()) == pytest.approx(pairs / (len(pos) * len(neg)), abs=1e-12)
    assert texroi.average_precision([0.3] * 10, [1, 1, 0, 0, 0, 0, 0, 0, 0, 0]) == 0.2
    assert texroi.brier([0.5, 0.5], [1, 0]) == 0.25


def test_delong_identity_and_antisymmetry():
    rng = np.random.default_rng(2)
    y = [0, 1] * 15
    a = rng.uniform(size=30).tolist()
    b = rng.uniform(size=30).tolist()
    same = texroi.delong_test(a, a, y)
    assert same["z"] == 0.0 and same["p_value"] == 1.0
    ab, ba = texroi.delong_test(a, b, y), texroi.delong_test(b, a, y)
    assert ab["z"] == -ba["z"] and ab["p_value"] == ba["p_value"]


def test_folds_keep_subjects_together():
    knees = [f"S{i}_{s}" for i in range(40) for s in "LR"]
    subjects = [k.split("_")[0] for k in knees]
    labels = [1 if i % 5 == 0 else 0 for i in range(80)]
    folds = texroi.stratified_subject_kfold(knees, subjects, labels, k=4, seed=3)
    assert sorted(set(folds)) == [0, 1, 2, 3]
    for i in range(0, 80, 2):
        assert folds[i] == folds[i + 1]


def test_gbm_round_trip_and_separable_fit():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(120, 3))
    y = (x[:, 1] > 0.2).astype(int).tolist()
    model = texroi.train_gbm(x, y, n_trees=50, min_samples_leaf=5)
    json.loads(model)
    p = texroi.predict_gbm(model, x)
    assert texroi.roc_auc(p, y) == 1.0


def test_errors_become_value_errors():
    with pytest.raises(ValueError):
        texroi.roc_auc([0.1, 0.2], [1])
    with pytest.raises(ValueError):
        texroi.lbp_code(np.zeros((9, 9)), 0, 0)


def test_cohort_experiment_and_cli(tmp_path):
    manifest = texroi.generate_cohort(tmp_path / "cohort", n_subjects=20, image_size=128, prevalence=0.3, seed=5)
    assert manifest.exists()
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        json.dumps(
            {
                "dataset": "cohort/manifest.csv",
                "output_dir": "run",
                "folds": {"k": 3},
                "gbm": {"n_trees": 10, "min_samples_leaf": 3},
                "models": ["model2", "model5"],
                "metrics": {"n_boot": 100},
            }
        )
    )
    res = texroi.run_experiment(cfg)
    assert res["failures"] == {}
    report = json.loads(res["report"])
    assert [m["name"] for m in report["models"]] == ["model2", "model5"]
    code, out, _ = texroi.cli(["compare", "--a", str(tmp_path / "run/predictions/model2.csv"),
                               "--b", str(tmp_path / "run/predictions/model5.csv")])
    assert code == 0 and out.startswith("auc_a=")
    assert texroi.cli(["nonsense"])[0] == 1
