"""Tests for the LR schedule, the training loop, and exact resume."""

import json

import numpy as np
import pytest

from dipnet import data as dat
from dipnet import train as tr
from dipnet.checkpoint import (CheckpointCorruptError, CheckpointVersionError,
                               load_checkpoint, save_checkpoint)
from dipnet.encoder import PatchConfig
from dipnet.train import TrainConfig


def tiny_patch_config():
    return PatchConfig(H=16, W=8, C=3, P=4, S=4, D=16, M=2, L=1, heads=2)


def tiny_train_config(**kw):
    base = dict(epochs=2, batch_size=8, p_ids=4, k_imgs=2, lr0=0.01,
                warmup_epochs=1, seed=3, eval_every=1)
    base.update(kw)
    return TrainConfig(**base)


def tiny_dataset(seed=0, images_per_id=4):
    return dat.generate_dataset(
        dat.DataSpec(num_ids=4, images_per_id=images_per_id, H=16, W=8), seed=seed
    )


# -- schedule -----------------------------------------------------------


def test_lr_warmup_start_and_end():
    tc = TrainConfig(epochs=10, warmup_epochs=2, lr0=0.04)
    assert tr.lr_at(0, tc, steps_per_epoch=5) == pytest.approx(0.004)
    assert tr.lr_at(10, tc, steps_per_epoch=5) == pytest.approx(0.04)


def test_lr_final_step_zero():
    tc = TrainConfig(epochs=10, warmup_epochs=2, lr0=0.04)
    assert abs(tr.lr_at(49, tc, steps_per_epoch=5)) < 1e-9


def test_lr_continuous_at_boundary():
    tc = TrainConfig(epochs=20, warmup_epochs=3, lr0=0.04)
    spe = 4
    before = tr.lr_at(3 * spe - 1, tc, spe)
    at = tr.lr_at(3 * spe, tc, spe)
    after = tr.lr_at(3 * spe + 1, tc, spe)
    assert before < at
    assert abs(at - 0.04) < 1e-12
    assert at - after < 0.04 * 0.01


def test_lr_monotone_shape():
    tc = TrainConfig(epochs=8, warmup_epochs=2, lr0=0.1)
    vals = [tr.lr_at(s, tc, 4) for s in range(32)]
    warm = vals[:8]
    cool = vals[8:]
    assert all(a < b for a, b in zip(warm, warm[1:]))
    assert all(a >= b for a, b in zip(cool, cool[1:]))


def test_pk_shape_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=32, p_ids=4, k_imgs=4)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=4, p_ids=4, k_imgs=1)


# -- training loop ------------------------------------------------------


def test_zero_lr_keeps_parameters(tmp_path):
    ds = tiny_dataset()
    tc = tiny_train_config(epochs=1, lr0=0.0)
    model, _ = tr.train(ds, tc, tiny_patch_config(), tmp_path)
    fresh = tr.DipModel(tiny_patch_config(), num_classes=4, seed=tc.seed)
    for name in fresh.params:
        np.testing.assert_array_equal(model.params[name].data,
                                      fresh.params[name].data)


def test_zero_coefficients_keep_parameters(tmp_path):
    ds = tiny_dataset()
    tc = tiny_train_config(epochs=1, lambda_id=0.0, lambda_t=0.0, lambda_pe=0.0)
    model, _ = tr.train(ds, tc, tiny_patch_config(), tmp_path)
    fresh = tr.DipModel(tiny_patch_config(), num_classes=4, seed=tc.seed)
    for name in fresh.params:
        np.testing.assert_array_equal(model.params[name].data,
                                      fresh.params[name].data)


def test_identical_seeds_identical_logs(tmp_path):
    ds = tiny_dataset()
    _, recs1 = tr.train(ds, tiny_train_config(), tiny_patch_config(), tmp_path / "a")
    _, recs2 = tr.train(ds, tiny_train_config(), tiny_patch_config(), tmp_path / "b")
    assert json.dumps(recs1, sort_keys=True) == json.dumps(recs2, sort_keys=True)
    log1 = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    log2 = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert log1 == log2


def test_different_seed_changes_training(tmp_path):
    ds = tiny_dataset()
    _, recs1 = tr.train(ds, tiny_train_config(seed=3), tiny_patch_config(), tmp_path / "a")
    _, recs2 = tr.train(ds, tiny_train_config(seed=4), tiny_patch_config(), tmp_path / "b")
    assert recs1[-1]["total"] != recs2[-1]["total"]


def test_metrics_log_has_loss_and_eval_fields(tmp_path):
    ds = tiny_dataset()
    query = dat.generate_dataset(dat.DataSpec(4, 2, H=16, W=8, camera=1), seed=0)
    gallery = dat.generate_dataset(dat.DataSpec(4, 2, H=16, W=8, camera=2), seed=0)
    _, recs = tr.train(ds, tiny_train_config(), tiny_patch_config(), tmp_path,
                       eval_query=query, eval_gallery=gallery)
    for rec in recs:
        for key in ("epoch", "lr", "id_loss", "triplet_loss", "pe_loss",
                    "pe_loss_transformed", "total", "rank1", "map"):
            assert key in rec
    lines = (tmp_path / "metrics.jsonl").read_text().strip().splitlines()
    assert len(lines) == 2
    assert json.loads(lines[0])["epoch"] == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_error(tmp_path):
    ds = tiny_dataset()
    tc = tiny_train_config(epochs=1, lr0=1e6)  # guaranteed blow-up
    with pytest.raises(tr.DivergenceError):
        for _ in range(6):  # may take a few epochs to go non-finite
            tr.train(ds, tc, tiny_patch_config(), tmp_path)
            tc = tiny_train_config(epochs=tc.epochs + 1, lr0=1e6)


# -- checkpointing ------------------------------------------------------


def test_checkpoint_roundtrip_bits(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a": rng.normal(size=(3, 4)).astype(np.float32),
              "b": rng.normal(size=7).astype(np.float32)}
    mom = {k: rng.normal(size=v.shape).astype(np.float32) for k, v in params.items()}
    path = tmp_path / "ck.dip"
    save_checkpoint(path, {"x": 1}, 5, params, mom, rng_state={"seed": 9})
    config, epoch, p2, m2, rng_state = load_checkpoint(path)
    assert config == {"x": 1}
    assert epoch == 5
    assert rng_state == {"seed": 9}
    for k in params:
        assert p2[k].tobytes() == params[k].tobytes()
        assert m2[k].tobytes() == mom[k].tobytes()


def test_checkpoint_truncation_detected(tmp_path):
    path = tmp_path / "ck.dip"
    save_checkpoint(path, {}, 0, {"a": np.zeros(4, dtype=np.float32)}, {})
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_checkpoint_bitflip_detected(tmp_path):
    path = tmp_path / "ck.dip"
    save_checkpoint(path, {}, 0, {"a": np.ones(4, dtype=np.float32)}, {})
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    import struct

    path = tmp_path / "ck.dip"
    save_checkpoint(path, {}, 0, {"a": np.ones(2, dtype=np.float32)}, {})
    blob = bytearray(path.read_bytes())
    blob[8:12] = struct.pack("<I", 99)
    # re-seal the checksum so only the version differs
    import hashlib

    body = bytes(blob[:-32])
    path.write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    ds = tiny_dataset(images_per_id=6)
    pc = tiny_patch_config()
    full_tc = tiny_train_config(epochs=3, checkpoint_every=1)
    _, full_recs = tr.train(ds, full_tc, pc, tmp_path / "full")

    # resume from the state captured after epoch 1 of the same run
    _, resumed_recs = tr.train(
        ds, full_tc, pc, tmp_path / "resumed",
        resume_from=tmp_path / "full" / "checkpoint_ep0001.dip",
    )
    assert len(resumed_recs) == 1
    # next-epoch losses agree bit-exactly with the uninterrupted run
    assert json.dumps(resumed_recs[0], sort_keys=True) == \
        json.dumps(full_recs[2], sort_keys=True)


def test_resume_rejects_other_geometry(tmp_path):
    from dipnet.evaluate import ConfigMismatchError

    ds = tiny_dataset()
    pc = tiny_patch_config()
    tr.train(ds, tiny_train_config(epochs=1), pc, tmp_path)
    other = PatchConfig(H=16, W=8, C=3, P=4, S=4, D=16, M=3, L=1, heads=2)
    with pytest.raises(ConfigMismatchError):
        tr.train(ds, tiny_train_config(epochs=2), other, tmp_path / "x",
                 resume_from=tmp_path / "checkpoint.dip")


def test_checkpoint_written_at_cadence(tmp_path):
    ds = tiny_dataset()
    tc = tiny_train_config(epochs=3, checkpoint_every=2)
    tr.train(ds, tc, tiny_patch_config(), tmp_path)
    assert (tmp_path / "checkpoint_ep0001.dip").exists()
    assert not (tmp_path / "checkpoint_ep0000.dip").exists()
    assert (tmp_path / "checkpoint.dip").exists()
    _, epoch, _, _, _ = load_checkpoint(tmp_path / "checkpoint.dip")
    assert epoch == 2
