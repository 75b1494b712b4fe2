import csv
import dataclasses

import numpy as np
import pytest

from skippatch import autodiff as ad
from skippatch import training
from skippatch.architectures import forward
from skippatch.autodiff import Tape, Tensor
from skippatch.data import is_one_hot, synth_corpus
from skippatch.training import (AdamState, TrainConfig, TrainingError, adam_step, compare_variants, from_checkpoint,
                                to_checkpoint, train)
from skippatch.checkpoint import encode


def small(stage="mask", **kw):
    base = dict(stage=stage, resolution=32, epochs=4, seed=3, synthetic_n=2, unet_base=4, noise_side=4)
    return TrainConfig(**{**base, **kw})


def read_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- Adam -------------------------------------------------------------------------

def test_adam_first_step_by_hand():
    p = {"w": Tensor(np.array([1.0]))}
    state = AdamState(lr=0.1)
    adam_step(p, {"w": np.array([1.0])}, state)
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert p["w"].data[0] - 1.0 == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert abs((p["w"].data[0] - 1.0) - (-0.0999999990)) < 1e-6


def test_adam_matches_textbook_recurrence():
    g = np.random.default_rng(0)
    p0 = g.normal(size=7)
    grads = [g.normal(size=7) for _ in range(5)]
    p = {"w": Tensor(p0.copy())}
    state = AdamState(lr=0.01, beta1=0.5, beta2=0.999, eps=1e-8)
    ref, m, v = p0.copy(), np.zeros(7), np.zeros(7)
    for t, gr in enumerate(grads, 1):
        adam_step(p, {"w": gr}, state)
        m = 0.5 * m + 0.5 * gr
        v = 0.999 * v + 0.001 * gr * gr
        ref -= 0.01 * (m / (1 - 0.5 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, ref, rtol=1e-12, atol=1e-15)


def test_adam_zero_gradient_is_noop():
    p = {"w": Tensor(np.arange(4.0))}
    adam_step(p, {"w": np.zeros(4)}, AdamState())
    np.testing.assert_array_equal(p["w"].data, np.arange(4.0))


def test_adam_rejects_non_finite_without_updating():
    p = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
    state = AdamState()
    with pytest.raises(FloatingPointError, match="'?b'?"):
        adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state)
    np.testing.assert_array_equal(p["a"].data, 1.0)
    assert state.step == 0


# --- config -----------------------------------------------------------------------

def test_config_defaults():
    c = TrainConfig()
    assert (c.resolution, c.variant, c.l1_weight, c.seed) == (64, "skip", 100.0, 42)
    assert c.crop_area == 0.9
    assert TrainConfig(stage="em").crop_area == 0.98


def test_config_round_trip_and_validation():
    c = small("em", l1_weight=5.0)
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError, match="unknown config keys: colour"):
        TrainConfig.from_dict({"colour": 1})
    with pytest.raises(ValueError, match="wrong type"):
        TrainConfig.from_dict({"epochs": "10"})
    with pytest.raises(ValueError, match="wrong type"):
        TrainConfig.from_dict({"epochs": True})
    with pytest.raises(ValueError):
        TrainConfig(variant="p32")
    with pytest.raises(ValueError):
        TrainConfig(crop_area=1.5)


# --- loops ------------------------------------------------------------------------

@pytest.mark.parametrize("stage", ["mask", "em"])
def test_training_is_deterministic(tmp_path, stage):
    cfg = small(stage, checkpoint_interval=2)
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    for name in ("loss.csv", "ckpt_000002.spgn", "final.spgn"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("stage", ["mask", "em"])
def test_resume_replays_uninterrupted_run(tmp_path, stage):
    cfg = small(stage, epochs=6, checkpoint_interval=3)
    full = train(cfg, tmp_path / "full")
    resumed = train(cfg, tmp_path / "resumed", resume=tmp_path / "full" / "ckpt_000003.spgn")
    assert (tmp_path / "full" / "final.spgn").read_bytes() == (tmp_path / "resumed" / "final.spgn").read_bytes()
    assert resumed.log == full.log[3:]


def test_resume_rejects_other_stage(tmp_path):
    train(small("mask", epochs=1), tmp_path / "m")
    with pytest.raises(TrainingError):
        train(small("em", epochs=2), tmp_path / "e", resume=tmp_path / "m" / "final.spgn")


def test_checkpoint_state_round_trip():
    res = train(small("em", epochs=2))
    state = from_checkpoint(to_checkpoint(res.state))
    assert encode(to_checkpoint(state)) == encode(to_checkpoint(res.state))
    assert state.step == 2 and state.opt_g.step == 2


def test_objective_decomposition(tmp_path):
    cfg = small("em", epochs=3, l1_weight=7.5)
    train(cfg, tmp_path)
    for row in read_log(tmp_path / "loss.csv"):
        bce, l1, total = float(row["loss_g_bce"]), float(row["loss_g_l1"]), float(row["loss_g_total"])
        assert abs(total - (bce + 7.5 * l1)) <= 1e-12 * max(1.0, abs(total))


def test_zero_lambda_with_frozen_discriminator():
    res = train(small("em", epochs=3, l1_weight=0.0), update_d=False)
    assert res.state.opt_d.step == 0
    for _, _, bce, l1, total in res.log:
        assert l1 > 0
        assert total == bce


# first step with loss_d < 0.1 in the frozen-G oracle run (seed 42, R=64, n=8) was 1328; bound = 1.5x
FROZEN_G_STEP_BOUND = 1992


def test_frozen_generator_discriminator_learns():
    cfg = TrainConfig(stage="mask", resolution=64, synthetic_n=8, seed=42)
    state, data = training.init_state(cfg), training.load_training_data(cfg)
    loss_d = float("inf")
    while loss_d >= 0.1 and state.step < FROZEN_G_STEP_BOUND:
        loss_d = training.mask_gan_step(state, data, update_g=False)[0]
    assert loss_d < 0.1, f"D loss {loss_d:.3f} after {state.step} steps"
    assert state.opt_g.step == 0


def _pair_l1(state, data):
    out = forward(state.gen_graph, state.gen, Tensor(data.masks[0][None])).data[0]
    return float(np.abs(out - data.images[0]).mean())


def test_large_lambda_generator_gradient_is_l1_gradient():
    cfg = small("em", l1_weight=1e6)
    state, data = training.init_state(cfg), synth_corpus(1, 32, 0)
    x, y = Tensor(data.masks[0][None]), Tensor(data.images[0][None])

    def grads(with_bce):
        with Tape() as tape:
            fake = forward(state.gen_graph, state.gen, x)
            loss = ad.l1_loss(fake, y) * cfg.l1_weight
            if with_bce:
                d = forward(state.disc_graph, state.disc, ad.concat_channels([x, fake]))
                loss = ad.bce_loss(d, np.ones(d.shape)) + loss
        tape.backward(loss)
        return np.concatenate([p.grad.reshape(-1) for p in state.gen.values()])

    full, l1_only = grads(True), grads(False)
    cos = full @ l1_only / (np.linalg.norm(full) * np.linalg.norm(l1_only))
    assert cos > 1 - 1e-9


@pytest.mark.xfail(strict=True, reason="L1 with lambda=1e6 is not reliably <= L1 with lambda=100 at desk "
                   "scale; this seed is a deterministic counterexample (0.0739 vs 0.0735 after 300 steps)")
def test_large_lambda_final_l1_not_worse():
    data = synth_corpus(1, 32, 1)
    base = TrainConfig(stage="em", resolution=32, epochs=300, synthetic_n=1, unet_base=8, seed=1)
    l1 = {lam: _pair_l1(train(dataclasses.replace(base, l1_weight=lam), data=data).state, data)
          for lam in (100.0, 1e6)}
    assert l1[1e6] <= l1[100.0]


def test_mask_stage_outputs_stay_simplex():
    res = train(small("mask", epochs=10))
    z = Tensor(np.random.default_rng(0).normal(size=(2, 8, 4, 4)))
    out = forward(res.state.gen_graph, res.state.gen, z).data
    assert np.abs(out.sum(axis=1) - 1).max() < 1e-12 and out.min() > 0


def test_non_finite_loss_aborts(tmp_path, monkeypatch):
    calls = []

    def fake_step(state, data, update_g, update_d):
        calls.append(1)
        state.step += 1
        return (0.5, 0.5, 0.0, 0.5) if len(calls) < 3 else (float("nan"), 0.5, 0.0, 0.5)

    monkeypatch.setattr(training, "mask_gan_step", fake_step)
    with pytest.raises(TrainingError, match="step 3"):
        train(small("mask", epochs=10), tmp_path)
    assert len(read_log(tmp_path / "loss.csv")) == 2


def test_dataset_resolution_mismatch():
    with pytest.raises(TrainingError, match="resolution"):
        train(small("em"), data=synth_corpus(1, 64, 0))


def test_compare_variants_csv(tmp_path):
    cfg = small("em", epochs=3)
    results = compare_variants(cfg, ["p70", "skip"], tmp_path / "cmp.csv", out_dir=tmp_path / "runs")
    rows = read_log(tmp_path / "cmp.csv")
    assert [r["variant"] for r in rows] == ["p70"] * 3 + ["skip"] * 3
    assert (tmp_path / "runs" / "skip" / "final.spgn").is_file()
    assert set(results) == {"p70", "skip"}


def test_training_uses_augmented_one_hot_batches():
    cfg = small("mask", epochs=1)
    state = training.init_state(cfg)
    masks, _ = training._sample_batch(state, synth_corpus(2, 32, 0), with_images=False)
    assert all(is_one_hot(m) for m in masks)
