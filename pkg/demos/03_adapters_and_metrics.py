"""Low-rank adapters on a frozen model, then the evaluation toolbox.

Run:  python3 demos/03_adapters_and_metrics.py [out_dir]
"""

# %% Setup
import sys
from pathlib import Path

import numpy as np
import torch

from sonardiff.codec import ImageGrid, save_png
from sonardiff.datasets import generate_toy_sonar, load_manifest
from sonardiff.denoiser import DenoiserConfig
from sonardiff.lora import default_adapters, merge, train_lora
from sonardiff.metrics import ClassifierConfig, classify_eval, fid, train_classifier
from sonardiff.model import SonarModel
from sonardiff.sampler import TrainConfig, evaluation_loss, manifest_prompts, sample_grid, train_ddpm

torch.set_num_threads(1)
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/03")
corpus = generate_toy_sonar(96, seed=7, out_dir=out / "corpus")
model = SonarModel.create(manifest_prompts(corpus, "tag"), seed=0,
                          denoiser_config=DenoiserConfig(widths=(16, 32, 64), d_cond=32, time_dim=32, groups=8))
train_ddpm(corpus, model, TrainConfig(total_steps=300, snapshot_every=300, batch_size=16))

# %% A shifted domain: the same scenes rendered with inverted contrast.
shifted = generate_toy_sonar(32, seed=12, out_dir=out / "shifted")
for e, img in zip(shifted.entries, shifted.load_images()):
    save_png(shifted.resolve(e), ImageGrid(1.0 - img.pixels))
shifted = load_manifest(out / "shifted" / "manifest.json")
latents = model.codec.images_to_tensor(shifted.load_images())
prompts = manifest_prompts(shifted, "tag")

# %% Train rank-8 adapters on every attention projection of a copy. The base weights stay frozen.
adapters = default_adapters(model.denoiser, rank=8, layers=list(model.denoiser.attention_layers))
before = evaluation_loss(model, latents, prompts, seed=99)
res = train_lora(model.to_checkpoint(), shifted, adapters,
                 TrainConfig(total_steps=200, snapshot_every=200, batch_size=16, learning_rate=1e-2, optimizer="adam"))
after = evaluation_loss(res.model, latents, prompts, seed=99)
print(f"held-noise loss on the shifted images: {before:.4f} -> {after:.4f}")

# %% Merging folds alpha * A @ B into the weights; the result behaves like the adapted model.
merged = SonarModel.from_checkpoint(merge(model.to_checkpoint(), res.adapters))
merged.meta["latent_hw"] = (16, 16)
print("merged adapter fingerprints:", [f[:12] for f in merged.meta["merged_adapters"]])

# %% Evaluation: features from a small classifier trained on real images.
# Decoded Gaussian latents, the sampler's starting point, serve as the noise baseline.
extractor = train_classifier(corpus.load_images(), [e.label for e in corpus.entries], cfg=ClassifierConfig(epochs=20))
samples = sample_grid(model, [e.caption for e in corpus.entries[:48]], seed=1)
noise = model.codec.tensor_to_images(torch.randn(48, 4, 16, 16, generator=torch.Generator().manual_seed(2)))
real = extractor.features(corpus.load_images()[48:])
print(f"FID samples {fid(real, extractor.features(samples)):.2f} vs pure noise {fid(real, extractor.features(noise)):.2f}")

# %% Classification with real training images only; held-out corpus as the test set.
held = generate_toy_sonar(48, seed=99, out_dir=out / "held")
table = classify_eval(corpus, held, ClassifierConfig(epochs=20), combinations=("real",))
print(table.to_markdown())
