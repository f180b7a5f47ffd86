import json

import numpy as np
import pytest
import torch

from enaet import losses, trainer
from enaet.data import make_batches
from enaet.networks import ema_update
from enaet.trainer import (
    CheckpointError,
    NonFiniteLossError,
    TrainConfig,
    config_from_text,
    config_to_text,
    init_state,
    load_checkpoint,
    load_config,
    save_checkpoint,
    save_config,
    train,
    train_step,
    weights_digest,
)


def one_batch(plan, cfg, epoch=0):
    stream = make_batches(plan, cfg.batch_size, cfg.image_size, cfg.seed, steps_per_epoch=1)
    return stream, next(iter(stream.epoch(epoch)))


def state_for(plan, cfg, stream):
    return init_state(cfg, plan.classes, stream.mean, stream.std)


# --- config ----------------------------------------------------------------------

def test_zero_epochs_rejected():
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=0)


@pytest.mark.parametrize("kw", [{"lr_backbone": 0}, {"lr_aet": -1}, {"mode": "mixmatch"}, {"max_lambda": (1, 2)},
                                {"guess_with": "oracle"}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_defaults_round_trip(tmp_path):
    cfg = TrainConfig()
    assert cfg.warm_lambda == (10, 7.5, 5, 2, 0.5)
    assert cfg.max_lambda == (1, 0.75, 0.5, 0.2, 0.05)
    assert (cfg.epochs, cfg.lr_backbone, cfg.lr_aet, cfg.batch_size) == (100, 0.002, 0.1, 128)
    save_config(cfg, tmp_path / "c.txt")
    assert load_config(tmp_path / "c.txt") == cfg
    assert config_to_text(config_from_text(config_to_text(cfg))) == config_to_text(cfg)


def test_config_unknown_key_is_error():
    with pytest.raises(ValueError, match=r":2: unknown config key 'learning_rate'"):
        config_from_text("epochs=3\nlearning_rate=0.1\n")


def test_config_bad_value_is_error():
    with pytest.raises(ValueError, match="epochs"):
        config_from_text("epochs=three\n")


def test_config_covers_every_field():
    keys = [line.split("=")[0] for line in config_to_text(TrainConfig()).splitlines()]
    for name in ("epochs", "lr_backbone", "lr_aet", "batch_size", "kl_lambda", "warm_lambda", "max_lambda",
                 "data_portion", "lambda_u", "ema_alpha", "image_size", "seed", "mode"):
        assert name in keys


# --- steps -----------------------------------------------------------------------------

def test_train_step_deterministic(toy_plan, make_config):
    cfg = make_config()
    stream, (lab, tgt, unl) = one_batch(toy_plan, cfg)
    a = train_step(state_for(toy_plan, cfg, stream), lab, tgt, unl, 0.5)
    b = train_step(state_for(toy_plan, cfg, stream), lab, tgt, unl, 0.5)
    assert a.as_row(["p", "a", "s", "e", "c"]) == b.as_row(["p", "a", "s", "e", "c"])


def test_loss_identity_per_step(toy_plan, make_config):
    cfg = make_config(warm_lambda=(0,) * 5)
    stream, (lab, tgt, unl) = one_batch(toy_plan, cfg)
    state = state_for(toy_plan, cfg, stream)
    for _ in range(3):
        terms = train_step(state, lab, tgt, unl, 4.0)
        assert all(v > 0 for v in terms.l_aet)
        assert abs(terms.l_total - terms.combined()) < 1e-6


def test_step_updates_backbone_decoders_and_teacher_once(toy_plan, make_config):
    cfg = make_config(warm_lambda=(0,) * 5)
    stream, (lab, tgt, unl) = one_batch(toy_plan, cfg)
    state = state_for(toy_plan, cfg, stream)
    before = {n: weights_digest(m) for n, m in
              [("enc", state.student.encoder), ("dec", state.student.decoders), ("teacher", state.teacher)]}
    train_step(state, lab, tgt, unl, 1.0)
    assert state.opt_backbone.state_dict()["state"][0]["step"] == 1
    assert all(s["momentum_buffer"] is not None for s in state.opt_aet.state_dict()["state"].values())
    assert weights_digest(state.student.encoder) != before["enc"]
    assert weights_digest(state.student.decoders) != before["dec"]
    assert weights_digest(state.teacher) != before["teacher"]


def test_decoders_frozen_when_aet_weights_zero(toy_plan, make_config):
    cfg = make_config(max_lambda=(0,) * 5, kl_lambda=1.0)
    stream, (lab, tgt, unl) = one_batch(toy_plan, cfg)
    state = state_for(toy_plan, cfg, stream)
    dec, enc = weights_digest(state.student.decoders), weights_digest(state.student.encoder)
    for i in range(3):
        train_step(state, lab, tgt, unl, float(i))
    assert weights_digest(state.student.decoders) == dec
    assert weights_digest(state.student.encoder) != enc


def test_gradients_do_not_reach_decoders_from_classification(toy_plan, make_config):
    cfg = make_config(max_lambda=(0,) * 5, kl_lambda=1.0)
    stream, (lab, tgt, unl) = one_batch(toy_plan, cfg)
    state = state_for(toy_plan, cfg, stream)
    train_step(state, lab, tgt, unl, 1.0)
    assert all(p.grad is None or not p.grad.any() for p in state.student.decoder_parameters())


def test_teacher_contracts_toward_frozen_student(toy_plan, make_config):
    cfg = make_config()
    stream, (lab, tgt, unl) = one_batch(toy_plan, cfg)
    state = state_for(toy_plan, cfg, stream)
    for i in range(2):
        train_step(state, lab, tgt, unl, float(i))

    def gap():
        return sum(float((t - s.detach()).double().pow(2).sum())
                   for t, s in zip(state.teacher.parameters(), state.student.parameters())) ** 0.5

    last = gap()
    assert last > 0
    for _ in range(10):
        ema_update(state.teacher, state.student, cfg.ema_alpha)
        now = gap()
        assert now <= last + 1e-12
        last = now


def test_baseline_mode_has_no_teacher_or_decoders(toy_plan, make_config):
    cfg = make_config(mode="supervised_baseline")
    stream, (lab, tgt, unl) = one_batch(toy_plan, cfg)
    state = state_for(toy_plan, cfg, stream)
    assert state.teacher is None and state.opt_aet is None and len(state.student.decoders) == 0
    terms = train_step(state, lab, tgt, unl, 0.0)
    assert terms.l_total == terms.l_x > 0


def test_non_finite_loss_names_component(toy_plan, make_config, monkeypatch):
    cfg = make_config()
    stream, (lab, tgt, unl) = one_batch(toy_plan, cfg)
    state = state_for(toy_plan, cfg, stream)
    monkeypatch.setattr(losses, "kl_consistency_loss", lambda p, q: torch.tensor(float("nan")))
    with pytest.raises(NonFiniteLossError) as err:
        train_step(state, lab, tgt, unl, 0.0)
    assert err.value.component == "l_kl"


# --- checkpoints ------------------------------------------------------------------------

def _assert_nested_equal(a, b):
    if isinstance(a, torch.Tensor):
        assert torch.equal(a, b)
    elif isinstance(a, dict):
        assert a.keys() == b.keys()
        for k in a:
            _assert_nested_equal(a[k], b[k])
    elif isinstance(a, (list, tuple)):
        assert len(a) == len(b)
        for x, y in zip(a, b):
            _assert_nested_equal(x, y)
    else:
        assert a == b


def test_checkpoint_round_trip_bit_exact(toy_plan, make_config, tmp_path):
    cfg = make_config(lr_schedule="cosine")
    stream, (lab, tgt, unl) = one_batch(toy_plan, cfg)
    state = init_state(cfg, toy_plan.classes, stream.mean, stream.std, total_steps=10)
    for i in range(2):
        train_step(state, lab, tgt, unl, float(i))
    state.epoch = 1
    save_checkpoint(state, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck", total_steps=10)
    _assert_nested_equal(state.student.state_dict(), back.student.state_dict())
    _assert_nested_equal(state.teacher.state_dict(), back.teacher.state_dict())
    _assert_nested_equal(state.opt_backbone.state_dict(), back.opt_backbone.state_dict())
    _assert_nested_equal(state.opt_aet.state_dict(), back.opt_aet.state_dict())
    _assert_nested_equal([s.state_dict() for s in state.scheduler], [s.state_dict() for s in back.scheduler])
    assert (back.epoch, back.step, back.config) == (1, 2, cfg)
    for k, g in state.rngs.items():
        assert g.bit_generator.state == back.rngs[k].bit_generator.state
    # Continuing from both must agree exactly.
    a = train_step(state, lab, tgt, unl, 1.0)
    b = train_step(back, lab, tgt, unl, 1.0)
    assert a.l_total == b.l_total


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "ck").write_bytes(b"\x00garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_checkpoint_version_mismatch(toy_plan, make_config, tmp_path, monkeypatch):
    cfg = make_config()
    state = init_state(cfg, toy_plan.classes)
    monkeypatch.setattr(trainer, "CHECKPOINT_VERSION", 99)
    save_checkpoint(state, tmp_path / "ck")
    monkeypatch.undo()
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(tmp_path / "ck")


# --- full runs ---------------------------------------------------------------------------

def test_one_epoch_run_layout(toy_plan, make_config, tmp_path):
    run = train(make_config(epochs=1), toy_plan, run_dir=tmp_path)
    assert len(run.history) == 1
    for name in ("config.snapshot", "history.csv", "splits.csv", "checkpoints/epoch_1"):
        assert (tmp_path / name).exists(), name
    rows = (tmp_path / "history.csv").read_text().splitlines()
    assert rows[0].startswith("epoch,l_total") and len(rows) == 2
    assert run.masked_label_reads == 0 and toy_plan.label_guard.reads == 0
    assert 0 <= run.history[0]["val_acc"] <= 1


def test_resume_matches_continuous(toy_plan, make_config, tmp_path):
    cfg = make_config(epochs=5)
    full = train(cfg, toy_plan)
    part = train(cfg, toy_plan, run_dir=tmp_path, epochs_to_run=3)
    assert len(part.history) == 3
    rest = train(cfg, toy_plan, run_dir=tmp_path, resume=tmp_path / "checkpoints" / "epoch_3")
    assert len(rest.history) == 5
    assert len(rest.trace) == len(full.trace)
    for a, b in zip(full.trace, rest.trace):
        for k in a:
            assert abs(a[k] - b[k]) <= 1e-6, k


def test_resume_finished_run_is_noop(toy_plan, make_config, tmp_path):
    cfg = make_config(epochs=1, mode="supervised_baseline")
    train(cfg, toy_plan, run_dir=tmp_path)
    again = train(cfg, toy_plan, run_dir=tmp_path, resume=tmp_path / "checkpoints" / "epoch_1")
    assert again.already_complete and len(again.history) == 1


def test_nan_aborts_with_checkpoint_and_report(toy_plan, make_config, tmp_path, monkeypatch):
    monkeypatch.setattr(losses, "aet_loss", lambda p, s: p.sum() * float("inf"))
    with pytest.raises(NonFiniteLossError) as err:
        train(make_config(warm_lambda=(0,) * 5), toy_plan, run_dir=tmp_path)
    report = json.loads((tmp_path / "abort_report.json").read_text())
    assert report["component"].startswith("l_aet_")
    assert (tmp_path / "checkpoints" / "abort_epoch_0").is_file()
    assert err.value.checkpoint == report["checkpoint"]
    load_checkpoint(report["checkpoint"])
