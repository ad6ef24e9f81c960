import json

import numpy as np
import pytest

from conjtta.checks import run_checks
from conjtta.experiments import MetaStudyConfig, ToyConfig, meta_template_study, reproduce_appendix_a1, task_invariance_study
from conjtta.meta import MetaConfig

SMALL_META = dict(dim=6, n_targets=2, n_per_class=40, n_train_per_class=60, train_epochs=3, meta=MetaConfig(iterations=4))


def test_run_checks_all_pass():
    results = run_checks()
    assert len(results) == 15
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_a1_small(tmp_path):
    cfg = ToyConfig(dim=8, n_train_per_class=50, n_test_per_class=100, train_epochs=2)
    res = reproduce_appendix_a1([0, 1], cfg, out_dir=tmp_path)
    assert set(res["table"]) == {(lam, m) for lam in cfg.levels for m in cfg.methods}
    assert all(0 <= v <= 1 for v in res["table"].values())
    assert len(res["curves"][(0.7, "none")]) == 1
    assert (tmp_path / "appendix_a1_table.csv").exists()
    with pytest.raises(ValueError):
        reproduce_appendix_a1([], cfg)


def test_a1_deterministic():
    cfg = ToyConfig(dim=8, n_train_per_class=50, n_test_per_class=100, train_epochs=2)
    assert reproduce_appendix_a1([3], cfg)["table"] == reproduce_appendix_a1([3], cfg)["table"]


def test_meta_study_small():
    res = meta_template_study(0, MetaStudyConfig(**SMALL_META))
    assert res.centered and len(res.trajectory) == 4
    assert res.curve.shape == (61, 2)
    json.dumps(res.to_dict())
    again = meta_template_study(0, MetaStudyConfig(**SMALL_META))
    assert np.array_equal(res.curve, again.curve)


def test_meta_study_squared_not_centered():
    res = meta_template_study(0, MetaStudyConfig(source_loss="squared", **SMALL_META))
    assert not res.centered


def test_task_invariance_small():
    out = task_invariance_study([0], MetaStudyConfig(**SMALL_META))
    assert -1 <= out["pearson_r"] <= 1
    assert len(out["per_seed"]["squared_prob"]) == 1
