"""Training objective, deterministic DDIM sampling/inversion and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import save_grid
from .denoiser import AttentionMode, AttentionTrace
from .errors import ConfigurationError, IngestionError, ParameterError, ShapeError
from .schedule import NoiseSchedule, forward_noise

log = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    num_steps: int = 50
    step_indices: tuple = ()
    eta: float = 0.0

    def resolve(self, T: int) -> "SamplerConfig":
        """Fill ``step_indices`` with ``num_steps`` uniformly spaced steps ending at T."""
        if self.eta != 0.0:
            raise ParameterError("only deterministic DDIM (eta = 0) is supported")
        if self.step_indices:
            idx = tuple(int(i) for i in self.step_indices)
        else:
            n = int(self.num_steps)
            if not 1 <= n <= T:
                raise ParameterError(f"num_steps must lie in 1..{T}")
            idx = tuple(int(round(x)) for x in np.linspace(T / n, T, n))
        if any(b <= a for a, b in zip(idx, idx[1:])) or idx[0] < 1 or idx[-1] != T:
            raise ParameterError(f"step indices must be strictly increasing within 1..{T} and end at {T}")
        return SamplerConfig(len(idx), idx, 0.0)


@dataclass
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    momentum: float = 0.9
    snapshot_every: int = 500
    seed: int = 0
    cond_dropout: float = 0.1
    prompt_source: str = "tag"  # "tag" (coarse phase) | "pair" (fine phase)
    grid_size: int = 4
    optimizer: str = "adam"  # "adam" | "sgd" (with momentum)

    def __post_init__(self):
        if self.total_steps < 0 or self.batch_size < 1:
            raise ParameterError("total_steps must be >= 0 and batch_size >= 1")
        if self.snapshot_every < 1 or (self.total_steps > 0 and self.snapshot_every > self.total_steps):
            raise ParameterError("snapshot_every must be >= 1 and fit into total_steps at least once")
        if self.prompt_source not in ("tag", "pair"):
            raise ParameterError("prompt_source must be 'tag' or 'pair'")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ParameterError("cond_dropout must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ParameterError("optimizer must be 'sgd' or 'adam'")


def training_loss(z0_batch, schedule: NoiseSchedule, denoiser, cond_batch, rng: torch.Generator,
                  cond_mask=None, reduction: str = "sum"):
    """Monte Carlo estimate of E ||eps - eps_theta(z_t, t, y)||^2.

    ``t`` is uniform on 1..T and ``eps`` standard normal, both drawn from
    ``rng``.  ``reduction="sum"`` sums squared errors per sample (the loss of
    an all-zero predictor is then about the latent size); ``"mean"`` divides
    by the latent size.  Either way the result is averaged over the batch.
    """
    if z0_batch.shape[0] == 0:
        raise ParameterError("empty batch")
    b = z0_batch.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=rng)
    eps = torch.randn(z0_batch.shape, generator=rng, dtype=z0_batch.dtype)
    z_t = forward_noise(z0_batch, t, eps, schedule).to(z0_batch.dtype)
    eps_hat = denoiser(z_t, t, cond_batch, cond_mask)
    sq = (eps - eps_hat).pow(2).flatten(1).sum(dim=1)
    if reduction == "mean":
        sq = sq / z0_batch[0].numel()
    elif reduction != "sum":
        raise ParameterError("reduction must be 'sum' or 'mean'")
    return sq.mean()


def ddim_step(z_t, t_from: int, t_to: int, eps_hat, schedule: NoiseSchedule):
    """One deterministic DDIM move between steps; works for increasing or decreasing t."""
    for t in (t_from, t_to):
        if int(t) != t or not 0 <= t <= schedule.T:
            raise ParameterError(f"step index {t} out of range 0..{schedule.T}")
    ab_from = schedule.alpha_bar_at(int(t_from))
    ab_to = schedule.alpha_bar_at(int(t_to))
    z0_hat = (z_t - math.sqrt(1.0 - ab_from) * eps_hat) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * z0_hat + math.sqrt(1.0 - ab_to) * eps_hat


def _check_latent(z, denoiser):
    if z.ndim != 4 or z.shape[1] != denoiser.config.latent_channels:
        raise ShapeError(f"latent batch of shape {tuple(z.shape)} does not fit the denoiser")


@torch.no_grad()
def ddim_sample(zT, cond, denoiser, schedule: NoiseSchedule, cfg: SamplerConfig | None = None, cond_mask=None):
    """Run the reverse DDIM chain from step T down to a clean latent."""
    cfg = (cfg or SamplerConfig()).resolve(schedule.T)
    _check_latent(zT, denoiser)
    idx = cfg.step_indices
    z = zT
    for i in range(len(idx) - 1, -1, -1):
        t_from = idx[i]
        t_to = idx[i - 1] if i > 0 else 0
        eps = denoiser(z, t_from, cond, cond_mask)
        z = ddim_step(z, t_from, t_to, eps, schedule)
    return z


@torch.no_grad()
def ddim_invert(z0, cond, denoiser, schedule: NoiseSchedule, cfg: SamplerConfig | None = None,
                capture: bool = False, cond_mask=None, run_tag: str = "content", target_layers=None):
    """Map a clean latent to its step-T noise latent.

    Each step from ``t_prev`` to ``t`` evaluates the denoiser on the current
    latent at step ``t`` and reuses that prediction (first-order inversion),
    so the inversion visits exactly the steps the sampler visits.  With
    ``capture`` the attention inputs at every visited step are recorded.
    """
    cfg = (cfg or SamplerConfig()).resolve(schedule.T)
    _check_latent(z0, denoiser)
    trace = AttentionTrace(run_tag)
    previous = denoiser.attention_mode if capture else None
    if capture:
        denoiser.set_attention_mode(AttentionMode("capture", target_layers=target_layers), trace)
    try:
        z = z0
        t_prev = 0
        for t in cfg.step_indices:
            eps = denoiser(z, t, cond, cond_mask)
            z = ddim_step(z, t_prev, t, eps, schedule)
            t_prev = t
    finally:
        if capture:
            denoiser.set_attention_mode(previous)
    return z, trace


# -- training loop ------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoints: list = field(default_factory=list)  # (step, path)
    snapshot_steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    log_path: Path | None = None

    def window_means(self, width: int = 100) -> tuple[float, float]:
        head = self.losses[:width]
        tail = self.losses[-width:]
        return float(np.mean(head)), float(np.mean(tail))


def manifest_prompts(manifest, source: str) -> list[str]:
    """Training prompt for every entry: its tag caption, or the low+high caption pair."""
    prompts = []
    missing = []
    for e in manifest.entries:
        if source == "pair":
            if not (e.caption_low and e.caption_high):
                missing.append(e.path)
                continue
            prompts.append(f"{e.caption_low.strip()} {e.caption_high.strip()}")
        else:
            prompts.append(e.caption or "")
    if missing:
        raise IngestionError("entries lack caption pairs", missing)
    return prompts


def load_latents(manifest, codec, dtype=torch.float32) -> torch.Tensor:
    images = manifest.load_images()
    return codec.images_to_tensor(images, dtype=dtype)


def _optimize(model, latents, prompt_ids, cfg: TrainConfig, params, on_step=None):
    """Shared minibatch loop (Adam or SGD with momentum); returns the per-step losses."""
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ConfigurationError("nothing to train")
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    else:
        opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = latents.shape[0]
    losses = []
    model.train()
    for step in range(1, cfg.total_steps + 1):
        t0 = time.perf_counter()
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        drop = torch.rand(cfg.batch_size, generator=gen) < cfg.cond_dropout
        ids = [[] if drop[j] else prompt_ids[int(i)] for j, i in enumerate(idx)]
        cond, mask = model.conditioner.embed_ids(ids)
        loss = training_loss(latents[idx], model.schedule, model.denoiser, cond, gen, mask, reduction="mean")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise FloatingPointError(f"training diverged at step {step}")
        losses.append(value)
        if on_step is not None:
            on_step(step, value, (time.perf_counter() - t0) * 1000.0)
    model.eval()
    return losses


@torch.no_grad()
def evaluation_loss(model, latents, prompts, seed: int = 0, repeats: int = 4, batch_size: int = 64) -> float:
    """Mean-reduced noise-prediction loss with noise and steps fixed by ``seed``.

    Every call with the same seed draws the same (t, eps) for each example, so
    two models can be compared on identical Monte Carlo samples.
    """
    if latents.shape[0] != len(prompts) or latents.shape[0] == 0:
        raise ParameterError("need one prompt per latent and at least one latent")
    gen = torch.Generator().manual_seed(seed)
    ids = [model.conditioner.ids(p) for p in prompts]
    total, count = 0.0, 0
    was_training = model.denoiser.training
    model.eval()
    for _ in range(repeats):
        for lo in range(0, latents.shape[0], batch_size):
            z0 = latents[lo:lo + batch_size]
            cond, mask = model.conditioner.embed_ids(ids[lo:lo + batch_size])
            loss = training_loss(z0, model.schedule, model.denoiser, cond, gen, mask, reduction="mean")
            total += float(loss) * z0.shape[0]
            count += z0.shape[0]
    model.train(was_training)
    return total / count


def sample_grid(model, prompts, seed: int, sampler_cfg: SamplerConfig | None = None) -> np.ndarray:
    """Fixed-seed samples for ``prompts``; returns decoded images (N, H, W, C)."""
    gen = torch.Generator().manual_seed(seed)
    h, w = model.meta.get("latent_hw", (16, 16))
    c = model.codec.latent_channels
    zT = torch.randn(len(prompts), c, h, w, generator=gen)
    with torch.no_grad():
        cond, mask = model.conditioner.embed(prompts)
        z0 = ddim_sample(zT, cond, model.denoiser, model.schedule, sampler_cfg, mask)
    return model.codec.tensor_to_images(z0)


def train_ddpm(manifest, model, cfg: TrainConfig, out_dir=None, sampler_cfg: SamplerConfig | None = None,
               sample_prompts=None) -> TrainResult:
    """Optimize the noise-prediction loss on ``manifest``.

    Writes ``ckpt_<step>.npz`` at step 0, at every ``snapshot_every`` steps
    and at the final step, a sample grid PNG per snapshot, and a JSON-lines
    run log ``train_log.jsonl`` with ``{step, loss, wall_ms}`` records.
    """
    if not manifest.entries:
        raise IngestionError("manifest is empty")
    prompts = manifest_prompts(manifest, cfg.prompt_source)
    latents = load_latents(manifest, model.codec)
    model.meta["latent_hw"] = tuple(latents.shape[2:])
    # vocabulary grows to cover the corpus before training
    model.extend_vocab(prompts, seed=cfg.seed)
    prompt_ids = [model.conditioner.ids(p) for p in prompts]
    phase = 3 if cfg.prompt_source == "pair" else 2
    model.phase = phase

    result = TrainResult()
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        result.log_path = out / "train_log.jsonl"
        log_fh = open(result.log_path, "w")
    grid_prompts = list(sample_prompts) if sample_prompts else list(dict.fromkeys(prompts))[: cfg.grid_size]

    def checkpoint(step, snapshot):
        if out is None:
            return
        path = model.save(out / f"ckpt_{step:06d}.npz", step=step, phase=phase, train=asdict(cfg))
        result.checkpoints.append((step, path))
        if snapshot:
            imgs = sample_grid(model, grid_prompts, seed=cfg.seed, sampler_cfg=sampler_cfg)
            save_grid(out / f"samples_{step:06d}.png", imgs)

    def on_step(step, loss, wall_ms):
        if log_fh is not None:
            log_fh.write(json.dumps({"step": step, "loss": loss, "wall_ms": round(wall_ms, 3)}) + "\n")
        snap = step % cfg.snapshot_every == 0
        if snap:
            result.snapshot_steps.append(step)
        if snap or step == cfg.total_steps:
            checkpoint(step, snap)
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, loss)

    try:
        checkpoint(0, False)
        if cfg.total_steps > 0:
            result.losses = _optimize(model, latents, prompt_ids, cfg, model.parameters(), on_step)
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
