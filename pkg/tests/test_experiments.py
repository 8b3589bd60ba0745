import csv

import pytest
from dataclasses import replace

from neuroseg.config import ConfigError, DataConfig
from neuroseg.experiments import (LOSS_VARIANTS, gradient_suite, grid_variants, load_splits, run_ablation,
                                  smoke_run_config, variant_config)
from neuroseg.imgio import PhantomConfig
from neuroseg.losses import HybridWeights
from neuroseg.network import ARCHITECTURE_VARIANTS


def test_loss_grid_has_eight_variants():
    assert len(LOSS_VARIANTS) == 8
    assert LOSS_VARIANTS["hybrid"] == HybridWeights(0.4, 0.2, 0.3, 0.1)
    assert LOSS_VARIANTS["focal"] == HybridWeights(0, 0, 1, 0)


def test_subset_weights_renormalise_defaults():
    w = LOSS_VARIANTS["tversky+contour+focal"]
    assert (w.w_tversky, w.w_boundary, w.w_focal, w.w_cldice) == pytest.approx((0.4 / 0.9, 0.2 / 0.9, 0.3 / 0.9, 0))
    for v in LOSS_VARIANTS.values():
        assert sum((v.w_tversky, v.w_boundary, v.w_focal, v.w_cldice)) == pytest.approx(1)


def test_grid_variants():
    assert grid_variants("architecture") == list(ARCHITECTURE_VARIANTS)
    assert grid_variants("loss", ["focal", "hybrid"]) == ["focal", "hybrid"]
    with pytest.raises(ConfigError):
        grid_variants("loss", ["nope"])
    with pytest.raises(ConfigError):
        grid_variants("optimiser")


def test_variant_config_changes_only_its_axis():
    base = smoke_run_config()
    v = variant_config(base, "architecture", "residual", 3)
    assert (v.network.block, v.network.attention, v.seed) == ("residual", "none", 3)
    assert v.loss == base.loss and v.data == base.data


def test_holdout_becomes_test_set():
    cfg = smoke_run_config()
    data = replace(cfg.data, n_samples=20, holdout=4)
    s = load_splits(data, cfg.preprocess)
    assert len(s.test) == 4 and len(s.train) + len(s.val) == 20
    assert not {x.id for x in s.test} & {x.id for x in s.train + s.val}


def test_missing_dataset_names_path(tmp_path):
    with pytest.raises(ConfigError, match="nowhere"):
        load_splits(DataConfig(dataset=str(tmp_path / "nowhere")), smoke_run_config().preprocess)


def test_ablation_needs_seeds(tmp_path):
    with pytest.raises(ConfigError):
        run_ablation(smoke_run_config(), "loss", [], tmp_path)


def test_tiny_architecture_ablation_writes_rows(tmp_path):
    cfg = smoke_run_config(epochs=1)
    cfg = replace(cfg, data=replace(cfg.data, n_samples=12, holdout=3),
                  train=replace(cfg.train, batch_size=4, steps_per_epoch=1))
    rows = run_ablation(cfg, "architecture", [0], tmp_path)
    assert [r["variant"] for r in rows] == list(ARCHITECTURE_VARIANTS)
    table = list(csv.DictReader(open(tmp_path / "architecture_summary.csv")))
    assert len(table) == 4 and {"dsc", "iou", "macro_f1", "cldice", "val_loss"} <= set(table[0])
    assert len(list(csv.DictReader(open(tmp_path / "per_seed.csv")))) == 4


def test_gradient_suite_shape():
    rows = gradient_suite(n_seeds=2)
    assert [r["loss"] for r in rows] == ["tversky", "focal", "boundary", "cldice", "hybrid"]
    assert all(r["passed"] for r in rows)
