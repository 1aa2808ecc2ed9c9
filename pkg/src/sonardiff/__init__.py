"""Desk-scale latent diffusion toolkit for side-scan sonar imagery."""

from .codec import ImageGrid, LatentGrid, SpaceToDepthCodec, decode, encode, load_png, save_png
from .conditioning import Conditioner, TextEncoder, Vocabulary, parse_tags, render_prompt, tokenize
from .datasets import DatasetManifest, ManifestEntry, generate_toy_sonar, load_manifest, split
from .denoiser import AttentionMode, AttentionTrace, Denoiser, DenoiserConfig, attention
from .errors import *  # noqa: F401,F403
from .model import Checkpoint, SonarModel
from .sampler import SamplerConfig, TrainConfig, ddim_invert, ddim_sample, train_ddpm, training_loss
from .schedule import NoiseSchedule, forward_noise, make_linear_schedule

__version__ = "0.1.0"
