import json

import numpy as np
import pytest
import torch

from styleless import synthdata
from styleless.content_transfer import TransferPolicy, gate_transfer
from styleless.errors import ConfigError
from styleless.losses import LossWeights
from styleless.networks import NetworkBundle, NetworkConfig, load_checkpoint
from styleless.trainer import (
    DataConfig,
    LossConfig,
    RunConfig,
    TrainConfig,
    Trainer,
    config_snapshot_toml,
    load_run_config,
    poly_lr,
    run_training,
    _resize_labels,
)

CAT = synthdata.toy_catalog()
NET = NetworkConfig(classes=8, content_channels=16, style_dim=8, stem_channels=8, disc_channels=8)


def tiny_items(n, domain, base_seed=0, res=(32, 32)):
    return [
        synthdata.generate_scene(
            synthdata.SceneSpec(seed=base_seed + i, resolution=res, domain=domain, catalog=CAT)
        )
        for i in range(n)
    ]


def tiny_trainer(seed=0, variant="uda_ct", min_instances=0, **overrides):
    config = TrainConfig(
        stage1_iters=4,
        stage2_iters=4,
        batch_size=2,
        resize=(32, 32),
        crop=(16, 16),
        seed=seed,
        variant=variant,
        pseudo_refresh_every=2,
        **overrides,
    )
    nets = NetworkBundle.create(NET, seed=seed)
    policy = TransferPolicy(
        tail_set=CAT.tail_set,
        cooccurrence_rules=synthdata.DEFAULT_COOCCURRENCE,
        min_tail_instances=min_instances,
    )
    t = Trainer(
        nets,
        CAT,
        config,
        LossWeights(),
        tiny_items(6, "source"),
        tiny_items(6, "target", base_seed=50),
        policy,
    )
    return t


def snapshot(nets):
    return {k: v.clone() for k, v in nets.state_dict().items()}


def changed(before, after, prefix):
    return any(
        not torch.equal(before[k], after[k]) for k in before if k.startswith(prefix)
    )


def test_poly_lr_closed_form():
    for t in (0, 1, 17, 1999):
        expect = 2.5e-4 * (1 - t / 2000) ** 0.9
        assert abs(poly_lr(2.5e-4, t, 2000, 0.9) - expect) < 1e-12


def test_zero_lr_keeps_parameters():
    t = tiny_trainer(lr_seg=0.0, lr_gen=0.0, lr_disc_img=0.0, lr_disc_out=0.0)
    t.refresh_pseudo_labels()
    before = snapshot(t.nets)
    t.train_step_uda(0)
    after = t.nets.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_alternation_isolates_parameter_groups():
    # discriminators frozen: generator phase must not move them
    t = tiny_trainer(lr_disc_img=0.0, lr_disc_out=0.0)
    t.refresh_pseudo_labels()
    before = snapshot(t.nets)
    t.train_step_uda(0)
    after = t.nets.state_dict()
    assert not changed(before, after, "d_")
    assert changed(before, after, "g_s") and changed(before, after, "e_c")

    # generator side frozen: discriminator phase must not move it
    t2 = tiny_trainer(lr_seg=0.0, lr_gen=0.0)
    t2.refresh_pseudo_labels()
    before = snapshot(t2.nets)
    t2.train_step_uda(0)
    after = t2.nets.state_dict()
    assert not changed(before, after, "stem")
    assert not changed(before, after, "e_") and not changed(before, after, "g_")
    assert changed(before, after, "d_img_s") and changed(before, after, "d_out")


def test_shared_stem_gets_gradient():
    t = tiny_trainer()
    t.refresh_pseudo_labels()
    before = snapshot(t.nets)
    t.train_step_uda(0)
    assert changed(before, t.nets.state_dict(), "stem.")


def test_step_determinism():
    reports = []
    for _ in range(2):
        t = tiny_trainer(seed=3)
        t.refresh_pseudo_labels()
        reports.append([t.train_step_uda(s).terms for s in range(3)])
    assert reports[0] == reports[1]


def test_gate_blocks_ct_term():
    t = tiny_trainer(min_instances=10_000)  # gate can never open
    t.refresh_pseudo_labels()
    report = t.train_step_ct(4)
    assert report.ct_fired is False and report.ct_count == 0
    assert report.terms["seg_ct"] == 0.0


def test_ct_term_fires_when_gated():
    t = tiny_trainer(min_instances=0)
    t.refresh_pseudo_labels()
    fired = []
    for s in range(4):
        rep = t.train_step_ct(s)
        fired.append(rep.ct_count)
        assert rep.terms["seg_ct"] >= 0.0
    assert any(c > 0 for c in fired)


def test_gate_rate_matches_bruteforce():
    items = tiny_items(20, "source")
    stats = synthdata.compute_stats(items, CAT)
    policy = TransferPolicy(
        tail_set=CAT.tail_set,
        cooccurrence_rules=synthdata.DEFAULT_COOCCURRENCE,
        min_tail_instances=stats.tail_instance_median,
    )
    nets = NetworkBundle.create(NET, seed=0)
    t = Trainer(
        nets,
        CAT,
        TrainConfig(stage1_iters=1, stage2_iters=0, resize=(32, 32), crop=(16, 16)),
        LossWeights(),
        items,
        tiny_items(4, "target", base_seed=50),
        policy,
    )
    expect = [gate_transfer(lab, policy) for _, lab in items]
    assert [it.gate for it in t.source] == expect
    assert 0 < sum(expect) < len(expect)  # the median rule splits the set


def test_resize_labels_nearest():
    idx = np.array([[0, 1], [2, 3]])
    up = _resize_labels(idx, (4, 4))
    assert up.tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]
    assert np.array_equal(_resize_labels(up, (2, 2)), idx)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(crop=(64, 64), resize=(32, 32))
    with pytest.raises(ConfigError):
        TrainConfig(crop=(12, 16))  # not divisible by 8
    with pytest.raises(ConfigError):
        TrainConfig(stage1_iters=-1)
    with pytest.raises(ConfigError):
        TrainConfig(variant="bidirectional")
    with pytest.raises(ConfigError):
        TrainConfig(pseudo_refresh_every=0)


def test_load_run_config_and_unknown_keys(tmp_path):
    good = tmp_path / "run.toml"
    good.write_text(
        """
[data]
source = "s"

[networks]
content_channels = 16

[losses]
cycle = 5.0
cb_beta = 0.9

[trainer]
stage1_iters = 1
stage2_iters = 0
"""
    )
    cfg = load_run_config(good)
    assert cfg.networks.content_channels == 16
    assert cfg.losses.weights.cycle == 5.0
    assert cfg.losses.cb_beta == 0.9
    assert cfg.trainer.stage1_iters == 1

    bad = tmp_path / "bad.toml"
    bad.write_text("[trainer]\nlearning = 1\n")
    with pytest.raises(ConfigError, match="learning"):
        load_run_config(bad)
    bad2 = tmp_path / "bad2.toml"
    bad2.write_text("[losses]\nstyle = 1\n")
    with pytest.raises(ConfigError, match="style"):
        load_run_config(bad2)
    bad3 = tmp_path / "bad3.toml"
    bad3.write_text("[other]\nx = 1\n")
    with pytest.raises(ConfigError, match="other"):
        load_run_config(bad3)


def test_config_snapshot_roundtrip(tmp_path):
    cfg = RunConfig(
        data=DataConfig(source="a", target="b", val=None),
        networks=NET,
        losses=LossConfig(weights=LossWeights(cycle=3.0), cb_beta=0.5),
        trainer=TrainConfig(stage1_iters=2, stage2_iters=1, resize=(32, 32), crop=(16, 16)),
    )
    path = tmp_path / "snap.toml"
    path.write_text(config_snapshot_toml(cfg))
    back = load_run_config(path)
    assert back.trainer.stage1_iters == 2
    assert back.losses.weights.cycle == 3.0
    assert back.networks.content_channels == 16
    assert back.data.source == "a"


@pytest.fixture(scope="module")
def run_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("runenv")
    synthdata.save_dataset(root / "source", tiny_items(6, "source"))
    synthdata.save_dataset(root / "target", tiny_items(6, "target", base_seed=50))
    synthdata.save_dataset(root / "val", tiny_items(3, "target", base_seed=90))
    return root


def run_config(root, out_name, **tr):
    defaults = dict(
        stage1_iters=4,
        stage2_iters=4,
        resize=(32, 32),
        crop=(16, 16),
        pseudo_refresh_every=3,
        seed=1,
    )
    defaults.update(tr)
    return RunConfig(
        data=DataConfig(
            source=str(root / "source"), target=str(root / "target"), val=str(root / "val")
        ),
        networks=NET,
        trainer=TrainConfig(**defaults),
    )


def test_run_training_products(run_env, tmp_path):
    cfg = run_config(run_env, "r1")
    result = run_training(cfg, tmp_path / "run")
    steps = [json.loads(l) for l in (tmp_path / "run" / "steps.jsonl").read_text().splitlines()]
    assert len(steps) == 8
    assert [s["stage"] for s in steps] == ["stage1"] * 4 + ["stage2"] * 4
    # no content-transfer objective ever contributes in stage 1
    assert all(s["terms"]["seg_ct"] == 0.0 for s in steps if s["stage"] == "stage1")
    assert result.checkpoint_path.exists()
    assert (tmp_path / "run" / "config.toml").exists()
    assert (tmp_path / "run" / "losses.jsonl").exists()
    assert len(result.metrics_history) >= 1

    # checkpoint round-trip gives identical predictions
    nets, extra = load_checkpoint(result.checkpoint_path)
    assert extra["total_steps"] == 8
    img, _ = tiny_items(1, "target", base_seed=90)[0]
    from styleless.trainer import _predictor

    a = _predictor(nets)(img)
    b = _predictor(nets)(img)
    assert np.array_equal(a, b)


def test_run_training_zero_iters(run_env, tmp_path):
    cfg = run_config(run_env, "r0", stage1_iters=0, stage2_iters=0)
    result = run_training(cfg, tmp_path / "zero")
    assert result.checkpoint_path.exists()
    assert (tmp_path / "zero" / "steps.jsonl").read_text() == ""


def test_run_training_determinism(run_env, tmp_path):
    a = run_training(run_config(run_env, "a"), tmp_path / "a")
    b = run_training(run_config(run_env, "b"), tmp_path / "b")
    assert (tmp_path / "a" / "losses.jsonl").read_text() == (tmp_path / "b" / "losses.jsonl").read_text()
    na, _ = load_checkpoint(a.checkpoint_path)
    nb, _ = load_checkpoint(b.checkpoint_path)
    for ka, va in na.state_dict().items():
        assert torch.equal(va, nb.state_dict()[ka])
    assert a.metrics_history == b.metrics_history


def test_run_training_source_only_variant(run_env, tmp_path):
    cfg = run_config(run_env, "so", variant="source_only")
    run_training(cfg, tmp_path / "so")
    steps = [json.loads(l) for l in (tmp_path / "so" / "steps.jsonl").read_text().splitlines()]
    assert all(set(s["terms"]) == {"seg_src", "total"} for s in steps)


def test_run_training_empty_source(tmp_path):
    (tmp_path / "empty" / "images").mkdir(parents=True)
    (tmp_path / "empty" / "labels").mkdir(parents=True)
    cfg = RunConfig(
        data=DataConfig(source=str(tmp_path / "empty")),
        networks=NET,
        trainer=TrainConfig(stage1_iters=1, stage2_iters=0, resize=(32, 32), crop=(16, 16)),
    )
    with pytest.raises(ConfigError):
        run_training(cfg, tmp_path / "out")
