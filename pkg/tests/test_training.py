import json
import struct
from itertools import product

import numpy as np
import pytest

from conftest import small_model
from longmalconv.data import DatasetIndex, Record, RandomTokens
from longmalconv.models import ModelConfig
from longmalconv.numerics import PAD_ID, InputError
from longmalconv.training import (AdamWState, Checkpoint, CheckpointError, TrainConfig, accuracy, adamw_step,
                                  checkpoint_bytes, evaluate, load_checkpoint, roc_auc, save_checkpoint,
                                  train, train_step)


def reference_adam(p, grads, lr, b1, b2, eps, wd):
    """Textbook AdamW at float64, one parameter array, list of gradients."""
    p = p.astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * mh / (np.sqrt(vh) + eps) - lr * wd * p
    return p


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in product(pos, neg))
    return total / (len(pos) * len(neg))


# --- optimizer -------------------------------------------------------------------

def test_zero_grad_no_decay_leaves_params(rng):
    p = {"w": rng.standard_normal((3, 4))}
    before = p["w"].copy()
    adamw_step(p, {"w": np.zeros((3, 4))}, AdamWState(weight_decay=0.0))
    np.testing.assert_array_equal(p["w"], before)


def test_decay_applies_without_gradient(rng):
    p = {"w": rng.standard_normal(5)}
    before = p["w"].copy()
    adamw_step(p, {"w": np.zeros(5)}, AdamWState(lr=0.1, weight_decay=0.5))
    np.testing.assert_allclose(p["w"], before * (1 - 0.1 * 0.5), rtol=1e-12)


def test_first_step_hand_formula(rng):
    g = rng.standard_normal(6)
    p = {"w": np.zeros(6)}
    adamw_step(p, {"w": g}, AdamWState(lr=0.01, weight_decay=0.0))
    # m_hat = g, v_hat = g^2 after bias correction
    np.testing.assert_allclose(p["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-10)


@pytest.mark.parametrize("wd", [0.0, 0.05])
def test_ten_steps_match_reference(rng, wd):
    p0 = rng.standard_normal((4, 3))
    grads = [rng.standard_normal((4, 3)) for _ in range(10)]
    p = {"w": p0.copy()}
    st = AdamWState(lr=3e-3, weight_decay=wd)
    for g in grads:
        adamw_step(p, {"w": g}, st)
    ref = reference_adam(p0, grads, 3e-3, 0.9, 0.999, 1e-8, wd)
    # moments are stored as float32 between steps
    np.testing.assert_allclose(p["w"], ref, rtol=1e-6, atol=1e-9)
    assert st.step == 10


def test_frozen_rows_stay_zero(rng):
    w = rng.standard_normal((260, 2))
    w[PAD_ID] = 0
    p = {"embed": w.copy()}
    adamw_step(p, {"embed": np.ones((260, 2))}, AdamWState(), {"embed": (PAD_ID,)})
    assert not p["embed"][PAD_ID].any()
    assert p["embed"][0, 0] != w[0, 0]


def test_shape_mismatch():
    with pytest.raises(InputError):
        adamw_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamWState())


# --- metrics ---------------------------------------------------------------------

def test_auc_edge_cases():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5] * 6, [0, 1] * 3) == 0.5
    assert roc_auc([0.3, 0.4], [1, 1]) is None


@pytest.mark.parametrize("seed", range(10))
def test_auc_matches_pairwise(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 200))
    scores = rng.integers(0, 10, n) / 10.0  # plenty of ties
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    assert abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)) < 1e-12


def test_accuracy_threshold():
    assert accuracy([0.5, 0.49, 0.9], [1, 0, 0]) == pytest.approx(2 / 3)


# --- checkpoints -----------------------------------------------------------------

def _ckpt(seed=0):
    model = small_model("malconv-gcg", seed)
    opt = AdamWState()
    adamw_step(model.params, {k: np.ones_like(v) for k, v in model.params.items()}, opt, model.frozen_rows)
    return Checkpoint(model.config, model.params, opt, seed, [{"epoch": 1, "loss": 0.5}])


def test_round_trip_is_byte_exact(tmp_path):
    ck = _ckpt()
    save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert checkpoint_bytes(back) == (tmp_path / "a.ckpt").read_bytes()
    assert back.config == ck.config and back.seed == 0 and back.log == ck.log
    for k in ck.params:
        np.testing.assert_array_equal(back.params[k], ck.params[k])
    assert back.optimizer.step == 1 and set(back.optimizer.m) == set(ck.params)


def test_layout_header(tmp_path):
    raw = checkpoint_bytes(_ckpt())
    assert raw[:8] == b"LMCVCKPT"
    version, meta_len = struct.unpack("<IQ", raw[8:20])
    meta = json.loads(raw[20:20 + meta_len])
    assert version == 1 and {"config", "optimizer", "seed", "log", "tensors"} <= set(meta)
    assert meta["tensors"][0]["offset"] == 0


@pytest.mark.parametrize("cut", [5, 30, -1, -9])
def test_truncation_is_an_integrity_error(tmp_path, cut):
    raw = checkpoint_bytes(_ckpt())
    (tmp_path / "t.ckpt").write_bytes(raw[:cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")


def test_bit_flip_fails_checksum(tmp_path):
    raw = bytearray(checkpoint_bytes(_ckpt()))
    raw[-100] ^= 1
    (tmp_path / "f.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "f.ckpt")


def test_unknown_version_refused(tmp_path):
    raw = bytearray(checkpoint_bytes(_ckpt()))
    raw[8:12] = struct.pack("<I", 99)
    (tmp_path / "v.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")


# --- training loop ---------------------------------------------------------------

@pytest.fixture
def tiny_index(tmp_path):
    recs = []
    for i in range(6):
        p = tmp_path / f"{i}.bin"
        p.write_bytes(RandomTokens(900 + 50 * i, i).read(0, 900 + 50 * i).astype(np.uint8).tobytes())
        recs.append(Record(p, i % 2, 900 + 50 * i))
    return DatasetIndex(recs)


def test_single_sample_step_lowers_loss():
    model = small_model("malconv-gcg", 1)
    src = RandomTokens(1500, 0)
    before = model.loss_and_grad(src, 1).loss
    train_step(model, [(src, 1)], AdamWState(lr=1e-2), TrainConfig())
    assert model.loss_and_grad(src, 1).loss < before


def test_same_seed_same_checkpoints(tmp_path, tiny_index):
    outs = []
    for run in ("a", "b"):
        model = small_model("malconv-gcg", 4)
        train(tiny_index, model, TrainConfig(batch_size=4, epochs=2, seed=7), tmp_path / run)
        outs.append([(tmp_path / run / f"epoch_{e:03d}.ckpt").read_bytes() for e in (1, 2)])
    assert outs[0] == outs[1]


def test_log_records_and_resume_equivalence(tmp_path, tiny_index):
    model = small_model("malconv", 2)
    res = train(tiny_index, model, TrainConfig(batch_size=4, epochs=2), tmp_path, test_index=tiny_index)
    lines = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [l["epoch"] for l in lines] == [1, 2]
    for key in ("loss", "acc", "auc", "peak_bytes", "wall_seconds", "test_acc"):
        assert key in lines[0]
    assert lines[0]["peak_bytes"] > 0
    ck = load_checkpoint(res.checkpoints[-1])
    before = evaluate(tiny_index, model)
    after = evaluate(tiny_index, ck.model())
    assert before["scores"] == after["scores"]


def test_unreadable_sample_is_skipped_and_logged(tmp_path, tiny_index):
    tiny_index.records[0].path.unlink()
    res = train(tiny_index, small_model("malconv", 0), TrainConfig(batch_size=4, epochs=1), tmp_path)
    assert res.skipped == [str(tiny_index.records[0].path)]
    assert res.log[0]["skipped"] == res.skipped


def test_on_epoch_can_stop(tiny_index):
    res = train(tiny_index, small_model("malconv", 0), TrainConfig(batch_size=6, epochs=5, track_memory=False),
                on_epoch=lambda rec: rec["epoch"] == 2)
    assert len(res.log) == 2


def test_dense_mode_trains_too(tiny_index):
    res = train(tiny_index, small_model("malconv-gcg", 0), TrainConfig(batch_size=3, epochs=1, mode="dense"))
    assert np.isfinite(res.log[0]["loss"])


def test_evaluate_single_class_has_no_auc(tiny_index):
    only_pos = DatasetIndex([r for r in tiny_index.records if r.label == 1])
    ev = evaluate(only_pos, small_model("malconv", 0))
    assert ev["auc"] is None and 0 <= ev["accuracy"] <= 1


def test_config_validation():
    with pytest.raises(InputError):
        TrainConfig(mode="sparse")
    with pytest.raises(InputError):
        TrainConfig(batch_size=0)
    assert ModelConfig.desk("malconv").channels == 32
