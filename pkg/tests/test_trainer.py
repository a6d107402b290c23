import json

import numpy as np
import pytest
import torch

from palm import checkpoint as ckpt
from palm.config import preset
from palm.losses import LossWeights
from palm.model import PalmPolicy
from palm.supervision import SupervisionConfig
from palm.trainer import (
    LOSS_KEYS,
    EmptyDatasetError,
    SampleBank,
    TrainConfig,
    Trainer,
    fit,
    load_checkpoint,
    metrics_path,
)


@pytest.fixture(scope="module")
def tiny_cfg():
    return preset("tiny", image_size=32)


@pytest.fixture(scope="module")
def bank(trajectories, tiny_cfg):
    tok = PalmPolicy(tiny_cfg).encoder.tokenizer
    return SampleBank(trajectories[:3], SupervisionConfig(), tiny_cfg.heads.feature_dim, tok)


def make_trainer(cfg, tc, seed=0):
    torch.manual_seed(seed)
    model = PalmPolicy(tc.model_config(cfg))
    return model, Trainer(model, tc, 10)


def params(model):
    return [p.detach().clone() for p in model.parameters()]


def test_zero_weights_leave_parameters_unchanged(tiny_cfg, bank):
    tc = TrainConfig(batch_size=16, weights=LossWeights(0, 0, 0, 0, 0, 0))
    model, tr = make_trainer(tiny_cfg, tc)
    before = params(model)
    rec = tr.train_step(bank.batch(bank.epoch_order(tc, 0)[0], model.dtype, True))
    assert rec["total"] == 0.0
    assert all(torch.equal(a, b) for a, b in zip(before, params(model)))


def test_loss_keys_and_determinism(tiny_cfg, bank):
    tc = TrainConfig(batch_size=16)
    runs = []
    for _ in range(2):
        model, tr = make_trainer(tiny_cfg, tc)
        recs = [tr.train_step(bank.batch(b, model.dtype, True)) for b in bank.epoch_order(tc, 0)[:2]]
        runs.append((recs, params(model)))
    assert set(runs[0][0][0]) == set(LOSS_KEYS) | {"total", "lr"}
    assert set(LOSS_KEYS) == {"global", "local", "spatial", "dynamic", "feature", "diffusion"}
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_epoch_order_covers_every_sample_once(bank):
    tc = TrainConfig(batch_size=16)
    for epoch in range(3):
        batches = bank.epoch_order(tc, epoch)
        assert len(batches) == bank.steps_per_epoch(tc)
        assert np.array_equal(np.sort(np.concatenate(batches)), np.arange(len(bank)))


def test_ablation_flags_touch_only_their_terms(tiny_cfg, bank):
    tc = TrainConfig(batch_size=16, no_affordance=True)
    model, tr = make_trainer(tiny_cfg, tc)
    rec = tr.train_step(bank.batch(bank.epoch_order(tc, 0)[0], model.dtype, True))
    assert all(rec[k] == 0.0 for k in ("global", "local", "spatial", "dynamic", "feature"))
    assert rec["diffusion"] > 0
    tc = TrainConfig(batch_size=16, no_progress=True, no_inverse_dynamics=True)
    model, tr = make_trainer(tiny_cfg, tc)
    assert model.cfg.action_channels == 7 and not model.cfg.inverse_dynamics
    rec = tr.train_step(bank.batch(bank.epoch_order(tc, 0)[0], model.dtype, False))
    assert all(rec[k] > 0 for k in LOSS_KEYS)


def test_fit_resume_and_checkpoint_contract(tmp_path, trajectories, tiny_cfg):
    tc = TrainConfig(batch_size=32, epochs=2)
    data = trajectories[:2]
    full = fit(data, tiny_cfg, tc, tmp_path / "full")
    rows = [json.loads(ln) for ln in metrics_path(full).read_text().splitlines()]
    assert rows and all(set(r) == set(LOSS_KEYS) | {"total", "lr", "step", "epoch"} for r in rows)
    assert [r["step"] for r in rows] == list(range(len(rows)))
    half = fit(data, tiny_cfg, tc, tmp_path / "part", max_steps=len(rows) // 2 + 1)
    resumed = fit(data, tiny_cfg, tc, tmp_path / "part", resume=half)
    assert metrics_path(resumed).read_text() == metrics_path(full).read_text()
    assert (tmp_path / "full" / "model.palmckpt").read_bytes() == (tmp_path / "part" / "model.palmckpt").read_bytes()

    sections, meta = ckpt.load(full)
    assert meta["supervision"] == SupervisionConfig().to_dict()
    assert meta["schedule"] == {"T": 100, "s": 0.008, "sample_steps": 10}
    assert meta["action_channels"] == 8
    again = tmp_path / "again.palmckpt"
    ckpt.save(again, sections, meta)
    assert again.read_bytes() == full.read_bytes()
    model, _ = load_checkpoint(full)
    assert model.trained


def test_no_progress_records_seven_channels(tmp_path, trajectories, tiny_cfg):
    path = fit(trajectories[:1], tiny_cfg, TrainConfig(batch_size=64, epochs=1, no_progress=True), tmp_path)
    _, meta = ckpt.load(path)
    assert meta["action_channels"] == 7
    model, _ = load_checkpoint(path)
    assert model.dit.channels == 7


def test_width_mismatch_names_both_shapes(tmp_path, trajectories, tiny_cfg):
    path = fit(trajectories[:1], tiny_cfg, TrainConfig(batch_size=64, epochs=1), tmp_path)
    sections, meta = ckpt.load(path)
    wide = preset("tiny", image_size=32)
    wide.dit.width = 32
    model = PalmPolicy(wide)
    with pytest.raises(ckpt.CheckpointShapeError) as err:
        ckpt.load_module_state(model.dit, sections["dit"], "dit")
    assert "(16," in str(err.value) and "(32," in str(err.value)


def test_version_mismatch(tmp_path):
    p = tmp_path / "x.palmckpt"
    ckpt.save(p, {"a": {"w": torch.zeros(2)}}, {})
    raw = bytearray(p.read_bytes())
    raw[8] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(ckpt.CheckpointVersionError):
        ckpt.load(p)


def test_empty_dataset(tmp_path, tiny_cfg):
    with pytest.raises(EmptyDatasetError):
        fit([], tiny_cfg, TrainConfig(), tmp_path)


def test_invalid_train_config():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
