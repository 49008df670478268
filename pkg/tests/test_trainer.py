import struct

import numpy as np
import pytest
import torch

from conftest import tiny_train_config
from polrep.trainer import (BUNDLE_VERSION, Bundle, BundleError, TrainConfig, TrainingError,
                            build_embedding_bank, bundle_from_bytes, bundle_to_bytes, init_model,
                            load_bundle, save_bundle, train, train_phase1, train_phase2,
                            write_training_log)


def snapshot(model):
    return {k: v.copy() for k, v in model.store.numpy().items()}


def test_zero_epochs_leave_init_untouched(tiny_dataset):
    cfg = tiny_train_config(rep_epochs=0, reg_epochs=0)
    init = snapshot(init_model(cfg))
    model, log = train_phase1(tiny_dataset, cfg)
    assert log == []
    assert train_phase2(tiny_dataset, model, cfg) == []
    for k, v in snapshot(model).items():
        assert np.array_equal(v, init[k])


def test_training_is_deterministic(tiny_dataset):
    cfg = tiny_train_config()
    a, log_a, _ = train(tiny_dataset, cfg)
    b, log_b, _ = train(tiny_dataset, cfg)
    assert bundle_to_bytes(a) == bundle_to_bytes(b)
    assert [p.row(i) for i, p in enumerate(log_a)] == [p.row(i) for i, p in enumerate(log_b)]


def test_seed_changes_result(tiny_dataset):
    a, _, _ = train(tiny_dataset, tiny_train_config(seed=1))
    b, _, _ = train(tiny_dataset, tiny_train_config(seed=2))
    assert not np.array_equal(a.bank.h, b.bank.h)


def test_phase2_only_moves_regressors(tiny_dataset):
    cfg = tiny_train_config(rep_epochs=1)
    model, _ = train_phase1(tiny_dataset, cfg)
    before = snapshot(model)
    log = train_phase2(tiny_dataset, model, cfg)
    assert len(log) == cfg.reg_epochs
    after = snapshot(model)
    regs = set(model.regressor_names())
    for k in before:
        if k in regs:
            continue
        assert np.array_equal(before[k], after[k]), k
    assert any(not np.array_equal(before[k], after[k]) for k in regs)


def test_phase1_leaves_regressors(tiny_dataset):
    cfg = tiny_train_config()
    init = snapshot(init_model(cfg))
    model, _ = train_phase1(tiny_dataset, cfg)
    for k in model.regressor_names():
        assert np.array_equal(init[k], snapshot(model)[k])


def test_phase1_loss_decreases(tiny_dataset):
    _, log = train_phase1(tiny_dataset, tiny_train_config(rep_epochs=15))
    assert log[-1].total < log[0].total


def test_batch_larger_than_split_rejected(tiny_dataset):
    with pytest.raises(TrainingError):
        train_phase1(tiny_dataset, tiny_train_config(rep_batch=10_000))


def test_bank_holds_posterior_means(tiny_dataset):
    cfg = tiny_train_config()
    bundle, _, _ = train(tiny_dataset, cfg)
    bank = bundle.bank
    assert len(bank) == len(tiny_dataset.train_idx)
    assert np.array_equal(bank.traj_idx, tiny_dataset.train_idx)
    assert np.array_equal(bank.knobs, tiny_dataset.knobs[tiny_dataset.train_idx])
    again = build_embedding_bank(tiny_dataset, bundle.model, cfg)
    assert again == bank


def test_bundle_round_trip(tiny_dataset, tmp_path):
    bundle, log1, _ = train(tiny_dataset, tiny_train_config())
    path = tmp_path / "m.pbnd"
    save_bundle(path, bundle)
    back = load_bundle(path)
    assert back.config == bundle.config
    assert back.stats == bundle.stats
    assert back.bank == bundle.bank
    for k, v in bundle.model.store.numpy().items():
        assert np.array_equal(v, back.model.store.numpy()[k])
    assert bundle_to_bytes(back) == path.read_bytes()
    write_training_log(tmp_path / "log.csv", log1, 2)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,nll,kl") and len(lines) == 1 + len(log1)


def test_bundle_errors(tiny_dataset):
    bundle, _, _ = train(tiny_dataset, tiny_train_config(rep_epochs=0, reg_epochs=0))
    raw = bundle_to_bytes(bundle)
    with pytest.raises(BundleError, match="magic"):
        bundle_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BundleError, match="version"):
        bundle_from_bytes(raw[:4] + struct.pack("<I", BUNDLE_VERSION + 1) + raw[8:])
    with pytest.raises(BundleError, match="truncated"):
        bundle_from_bytes(raw[:-5])
    # drop the final (BANK) section by lowering the section count
    with pytest.raises(BundleError, match="BANK"):
        bundle_from_bytes(raw[:8] + struct.pack("<I", 3) + raw[12:])


def test_config_text_round_trip():
    cfg = TrainConfig(alpha=0.0, zeta=2.5, seed=9, mean_pool_encoder=True)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_text("bogus = 1\n")


def test_config_validation_and_ablation_flags():
    with pytest.raises(ValueError):
        TrainConfig(rep_batch=0)
    with pytest.raises(ValueError):
        TrainConfig(init="xavier")
    assert TrainConfig(vae_only=True).loss_weights().alpha == 0
    assert TrainConfig(unconstrained_projector=True).loss_weights().zeta == 0
    assert TrainConfig(mean_pool_encoder=True).model_config().mean_pool
    assert TrainConfig(deterministic_ae=True).model_config().deterministic


def test_table3_defaults():
    cfg = TrainConfig()
    assert (cfg.context_length, cfg.rep_epochs, cfg.rep_batch, cfg.reg_epochs, cfg.reg_batch) == (32, 200, 64, 100, 256)
    assert (cfg.lr, cfg.alpha, cfg.zeta, cfg.beta_start, cfg.beta_end, cfg.tau_sim) == (1e-3, 1.0, 5.0, 0.0, 0.05, 0.5)
    assert (cfg.hidden, cfg.h_dim, cfg.z_dim) == (64, 32, 4)
