import json
import math

import numpy as np
import pytest
import torch

from sonardiff.datasets import DatasetManifest, ManifestEntry
from sonardiff.denoiser import AttentionMode
from sonardiff.errors import IngestionError, ParameterError
from sonardiff.model import Checkpoint, SonarModel
from sonardiff.sampler import (
    SamplerConfig, TrainConfig, ddim_invert, ddim_sample, ddim_step, train_ddpm, training_loss,
)
from sonardiff.schedule import NoiseSchedule, forward_noise, make_linear_schedule

from conftest import SMALL


class OracleNet(torch.nn.Module):
    """Returns exactly the noise used in forward_noise (recovered from z0)."""

    def __init__(self, z0, schedule):
        super().__init__()
        self.z0, self.schedule = z0, schedule

    def forward(self, z_t, t, cond=None, mask=None):
        ab = self.schedule.alpha_bar_at(t).to(z_t.dtype).reshape(-1, 1, 1, 1)
        return (z_t - ab.sqrt() * self.z0) / (1 - ab).sqrt()


class ZeroNet(torch.nn.Module):
    def forward(self, z_t, t, cond=None, mask=None):
        return torch.zeros_like(z_t)


def test_perfect_predictor_has_zero_loss():
    s = make_linear_schedule()
    z0 = torch.randn(8, 4, 4, 4, dtype=torch.float64)
    loss = training_loss(z0, s, OracleNet(z0, s), None, torch.Generator().manual_seed(0))
    assert loss.item() == pytest.approx(0.0, abs=1e-18)


def test_zero_predictor_loss_is_latent_size():
    s = make_linear_schedule()
    z0 = torch.randn(4000, 4, 2, 2, dtype=torch.float64)
    n = 16
    loss = training_loss(z0, s, ZeroNet(), None, torch.Generator().manual_seed(1))
    assert abs(loss.item() - n) <= 0.05 * n
    mean = training_loss(z0, s, ZeroNet(), None, torch.Generator().manual_seed(1), reduction="mean")
    assert mean.item() == pytest.approx(loss.item() / n)


def test_loss_seed_determinism(small_denoiser):
    s = make_linear_schedule()
    z0 = torch.randn(4, 4, 8, 8)
    a = training_loss(z0, s, small_denoiser, None, torch.Generator().manual_seed(3))
    b = training_loss(z0, s, small_denoiser, None, torch.Generator().manual_seed(3))
    assert a.item() == b.item() and a.item() >= 0


def test_empty_batch_rejected():
    with pytest.raises(ParameterError):
        training_loss(torch.zeros(0, 4, 4, 4), make_linear_schedule(), ZeroNet(), None, torch.Generator())


def _two_point_schedule():
    # alpha_bar_1 = 0.81, alpha_bar_2 = 0.25
    return NoiseSchedule(np.array([0.19, 1.0 - 0.25 / 0.81]))


def test_ddim_step_hand_value():
    s = _two_point_schedule()
    assert s.alpha_bar_at(2) == pytest.approx(0.25)
    out = ddim_step(1.366025, 2, 1, 1.0, s)
    assert out == pytest.approx(0.9 + math.sqrt(0.19), abs=1e-6)
    assert out == pytest.approx(1.335890, abs=1e-6)


def test_ddim_step_zero_noise():
    s = make_linear_schedule()
    z = np.array([0.3, -2.0])
    out = ddim_step(z, 80, 20, 0.0, s)
    np.testing.assert_allclose(out, math.sqrt(s.alpha_bar_at(20) / s.alpha_bar_at(80)) * z, rtol=1e-14)


def test_ddim_step_forward_back_identity():
    s = make_linear_schedule()
    rng = np.random.default_rng(0)
    z, eps = rng.standard_normal(10), rng.standard_normal(10)
    there = ddim_step(z, 30, 70, eps, s)
    np.testing.assert_allclose(ddim_step(there, 70, 30, eps, s), z, atol=1e-9)


def test_ddim_step_index_range():
    with pytest.raises(ParameterError):
        ddim_step(0.0, 101, 1, 0.0, make_linear_schedule())


def test_sampler_config_defaults():
    cfg = SamplerConfig().resolve(100)
    assert cfg.step_indices == tuple(range(2, 101, 2))
    with pytest.raises(ParameterError):
        SamplerConfig(step_indices=(5, 3, 100)).resolve(100)
    with pytest.raises(ParameterError):
        SamplerConfig(step_indices=(5, 50)).resolve(100)
    with pytest.raises(ParameterError):
        SamplerConfig(eta=0.5).resolve(100)


def test_sample_deterministic(small_denoiser):
    s = make_linear_schedule()
    zT = torch.randn(2, 4, 8, 8, generator=torch.Generator().manual_seed(0))
    assert torch.equal(ddim_sample(zT, None, small_denoiser, s), ddim_sample(zT, None, small_denoiser, s))


def test_one_step_chain_is_one_ddim_step(small_denoiser):
    s = make_linear_schedule()
    zT = torch.randn(1, 4, 8, 8, generator=torch.Generator().manual_seed(0))
    out = ddim_sample(zT, None, small_denoiser, s, SamplerConfig(step_indices=(100,)))
    with torch.no_grad():
        ref = ddim_step(zT, 100, 0, small_denoiser(zT, 100), s)
    assert torch.equal(out, ref)


def test_inversion_of_noise_returns_full_trace():
    from sonardiff.denoiser import Denoiser

    torch.manual_seed(0)
    net = Denoiser(SMALL)
    s = make_linear_schedule()
    z = torch.randn(1, 4, 8, 8)
    zT, trace = ddim_invert(z, None, net, s, SamplerConfig(num_steps=10), capture=True)
    assert zT.shape == z.shape
    assert len(trace) == 2 * 10
    assert trace.timesteps() == set(range(10, 101, 10))
    assert net.attention_mode.mode == "normal"


def test_inversion_without_capture_has_empty_trace(small_denoiser):
    _, trace = ddim_invert(torch.zeros(1, 4, 8, 8), None, small_denoiser, make_linear_schedule())
    assert len(trace) == 0


def test_invert_then_sample_exact_with_input_independent_net():
    # with a denoiser that ignores its input the chain is exactly invertible
    class Const(torch.nn.Module):
        def forward(self, z, t, cond=None, mask=None):
            return torch.full_like(z, 0.3)

    class Cfg:
        latent_channels = 4

    net = Const()
    net.config = Cfg()
    s = make_linear_schedule()
    z0 = torch.randn(2, 4, 4, 4, dtype=torch.float64)
    zT, _ = ddim_invert(z0, None, net, s)
    torch.testing.assert_close(ddim_sample(zT, None, net, s), z0, rtol=0, atol=1e-12)


def _manifest(corpus, n=None):
    entries = corpus.entries if n is None else corpus.entries[:n]
    return corpus.with_entries(entries)


def test_train_zero_steps_writes_initial_checkpoint_only(tmp_path, toy_corpus):
    model = SonarModel.create(denoiser_config=SMALL)
    before = model.to_checkpoint().digest("denoiser.")
    res = train_ddpm(_manifest(toy_corpus), model, TrainConfig(total_steps=0, snapshot_every=1), tmp_path)
    assert [s for s, _ in res.checkpoints] == [0]
    assert sorted(p.name for p in tmp_path.glob("*.npz")) == ["ckpt_000000.npz"]
    assert res.losses == []
    assert model.to_checkpoint().digest("denoiser.") == before


def test_snapshot_cadence_and_run_log(tmp_path, toy_corpus):
    model = SonarModel.create(denoiser_config=SMALL)
    cfg = TrainConfig(total_steps=6, snapshot_every=2, batch_size=4, seed=1)
    res = train_ddpm(_manifest(toy_corpus, 16), model, cfg, tmp_path)
    assert res.snapshot_steps == [2, 4, 6]
    assert sorted(p.name for p in tmp_path.glob("samples_*.png")) == [
        "samples_000002.png", "samples_000004.png", "samples_000006.png"]
    records = [json.loads(line) for line in res.log_path.read_text().splitlines()]
    assert [r["step"] for r in records] == list(range(1, 7))
    assert all(set(r) == {"step", "loss", "wall_ms"} and r["loss"] >= 0 for r in records)


def test_snapshot_arithmetic_1500():
    cfg = TrainConfig(total_steps=1500, snapshot_every=500)
    assert [s for s in range(1, cfg.total_steps + 1) if s % cfg.snapshot_every == 0] == [500, 1000, 1500]
    with pytest.raises(ParameterError):
        TrainConfig(total_steps=100, snapshot_every=500)


def test_training_is_seed_deterministic(tmp_path, toy_corpus):
    losses = []
    for run in range(2):
        model = SonarModel.create([e.caption for e in toy_corpus.entries], seed=0, denoiser_config=SMALL)
        res = train_ddpm(_manifest(toy_corpus, 16), model, TrainConfig(total_steps=3, snapshot_every=3,
                                                                       batch_size=4), tmp_path / str(run))
        losses.append(res.losses)
    assert losses[0] == losses[1]
    a = (tmp_path / "0" / "ckpt_000003.npz").read_bytes()
    assert a == (tmp_path / "1" / "ckpt_000003.npz").read_bytes()


def test_missing_images_listed(tmp_path, toy_corpus):
    m = toy_corpus.with_entries(list(toy_corpus.entries[:2]) + [ManifestEntry("images/nope.png", "ship", "real")])
    with pytest.raises(IngestionError, match="nope.png"):
        train_ddpm(m, SonarModel.create(denoiser_config=SMALL), TrainConfig(total_steps=1, snapshot_every=1))


def test_checkpoint_reload_bit_exact(tmp_path, small_model):
    path = small_model.save(tmp_path / "m.npz", step=3)
    again = SonarModel.load(path)
    a, b = small_model.to_checkpoint(), again.to_checkpoint()
    assert a.arrays.keys() == b.arrays.keys()
    for k in a.arrays:
        assert a.arrays[k].dtype == b.arrays[k].dtype
        assert np.array_equal(a.arrays[k], b.arrays[k])
    assert again.vocab.to_list() == small_model.vocab.to_list()
    ck = Checkpoint.load(path)
    assert ck.meta["step"] == 3 and ck.config["schedule"]["T"] == 100
