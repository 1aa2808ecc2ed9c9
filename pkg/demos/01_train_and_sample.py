"""Train a small denoiser on the toy corpus and look at what it learned.

Run from the repository root:  python3 demos/01_train_and_sample.py [out_dir]
Takes about a minute on one CPU thread.
"""

# %% Setup
import sys
from pathlib import Path

import torch

from sonardiff.codec import save_grid
from sonardiff.datasets import generate_toy_sonar
from sonardiff.denoiser import DenoiserConfig
from sonardiff.model import SonarModel
from sonardiff.sampler import SamplerConfig, TrainConfig, ddim_invert, ddim_sample, manifest_prompts, sample_grid, train_ddpm

torch.set_num_threads(1)
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/01")

# %% A corpus of 32x32 toy sonar returns.
# Every image carries a tag caption such as "image of SH12* ship on the AP4* seabed".
corpus = generate_toy_sonar(96, seed=7, out_dir=out / "corpus")
print(len(corpus), "images; label counts", corpus.label_counts())
print("first caption:", corpus.entries[0].caption)

# %% A reduced network keeps the demo quick. The library default is widths 32/64/128.
small = DenoiserConfig(widths=(16, 32, 64), d_cond=32, time_dim=32, groups=8)
model = SonarModel.create(manifest_prompts(corpus, "tag"), seed=0, denoiser_config=small)
result = train_ddpm(corpus, model, TrainConfig(total_steps=300, snapshot_every=150, batch_size=16),
                    out_dir=out / "run")
head, tail = result.window_means(50)
print(f"mean loss over the first 50 steps {head:.3f}, over the last 50 {tail:.3f}")
print("snapshots:", [step for step, _ in result.checkpoints])

# %% Sampling: four prompts, fixed seed, 50 deterministic DDIM steps.
prompts = [e.caption for e in corpus.entries[:4]]
save_grid(out / "samples.png", sample_grid(model, prompts, seed=1))
print("wrote", out / "samples.png")

# %% Inverting and re-sampling nearly recovers the latent, since eta = 0 makes both directions deterministic.
z0 = model.codec.images_to_tensor(corpus.load_images()[:8])
cond, mask = model.conditioner.embed(prompts * 2)
with torch.no_grad():
    zT, _ = ddim_invert(z0, cond, model.denoiser, model.schedule, SamplerConfig(50), cond_mask=mask)
    back = ddim_sample(zT, cond, model.denoiser, model.schedule, SamplerConfig(50), mask)
print(f"relative round-trip error {float(torch.linalg.norm(back - z0) / torch.linalg.norm(z0)):.4f}")
