"""Training-free style transfer by attention injection, and style exemplar selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import ImageGrid
from .denoiser import AttentionMode, AttentionTrace, blend_queries
from .errors import ConfigurationError, ParameterError
from .sampler import SamplerConfig, ddim_invert, ddim_sample

__all__ = [
    "StyleBlendConfig",
    "StyleResult",
    "blend_queries",
    "stylize",
    "stylize_batch",
    "kmeans",
    "KMeansResult",
    "image_features",
    "select_style_images",
]


@dataclass
class StyleBlendConfig:
    gamma: float = 0.5
    target_layers: set | None = None  # None: every self-attention layer
    sampler_cfg: SamplerConfig = field(default_factory=SamplerConfig)
    timesteps: tuple | None = None  # optional (lo, hi) inclusive sub-range for injection

    def __post_init__(self):
        if not 0.0 <= float(self.gamma) <= 1.0:
            raise ParameterError("gamma must lie in [0, 1]")
        if self.timesteps is not None:
            lo, hi = self.timesteps
            if lo > hi:
                raise ParameterError("timestep range must satisfy lo <= hi")


@dataclass
class StyleResult:
    images: list
    latents: torch.Tensor
    record: AttentionTrace
    content_trace: AttentionTrace
    style_trace: AttentionTrace


def _grids(x) -> list[ImageGrid]:
    if isinstance(x, ImageGrid):
        return [x]
    return [g if isinstance(g, ImageGrid) else ImageGrid(np.asarray(g)) for g in x]


@torch.no_grad()
def stylize_batch(contents, styles, cfg: StyleBlendConfig | None, codec, denoiser, schedule) -> StyleResult:
    """Stylize each content image with the matching style image.

    Both sets are inverted with a null prompt while their self-attention
    inputs are captured.  The content noise latent is then sampled again
    with keys and values taken from the style trace and queries blended
    toward the captured content queries by ``gamma``.
    """
    cfg = cfg or StyleBlendConfig()
    if denoiser is None or codec is None or schedule is None:
        raise ConfigurationError("stylize needs a loaded model (codec, denoiser and schedule)")
    contents, styles = _grids(contents), _grids(styles)
    if len(contents) != len(styles) or not contents:
        raise ParameterError("need equally many (>= 1) content and style images")
    dtype = next(denoiser.parameters()).dtype
    zc = codec.images_to_tensor(contents, dtype=dtype)
    zs = codec.images_to_tensor(styles, dtype=dtype)
    if zc.shape != zs.shape:
        raise ParameterError("content and style images must share a shape")
    scfg = cfg.sampler_cfg.resolve(schedule.T)
    layers = set(cfg.target_layers) if cfg.target_layers is not None else None

    previous = denoiser.attention_mode
    try:
        zc_T, trace_c = ddim_invert(zc, None, denoiser, schedule, scfg, capture=True, run_tag="content",
                                    target_layers=layers)
        _, trace_s = ddim_invert(zs, None, denoiser, schedule, scfg, capture=True, run_tag="style",
                                 target_layers=layers)
        steps = None
        if cfg.timesteps is not None:
            lo, hi = cfg.timesteps
            steps = {t for t in scfg.step_indices if lo <= t <= hi}
        record = AttentionTrace("stylized")
        mode = AttentionMode("inject", cfg.gamma, trace_c, trace_s, layers, steps, record)
        denoiser.set_attention_mode(mode)
        z0 = ddim_sample(zc_T.clone(), None, denoiser, schedule, scfg)
    finally:
        denoiser.set_attention_mode(previous)
    images = [ImageGrid(px) for px in codec.tensor_to_images(z0)]
    return StyleResult(images, z0, record, trace_c, trace_s)


def stylize(content, style, cfg: StyleBlendConfig | None = None, codec=None, denoiser=None, schedule=None,
            model=None) -> ImageGrid:
    if model is not None:
        codec, denoiser, schedule = model.codec, model.denoiser, model.schedule
    return stylize_batch([content], [style], cfg, codec, denoiser, schedule).images[0]


# -- exemplar selection -------------------------------------------------------


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list  # inertia after each assignment step
    n_iter: int


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    d2 = ((X - X[centers[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every remaining point coincides with a centre; take unused rows in order
            unused = [i for i in range(n) if i not in centers]
            centers.append(unused[0])
        else:
            centers.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, ((X - X[centers[-1]]) ** 2).sum(1))
    return X[centers].copy()


def kmeans(X, k: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops once assignments no longer change or after ``max_iters`` rounds.
    Empty clusters keep their previous centroid, so inertia never rises.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ParameterError("features must be a 2-D array")
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k must lie in 1..{n}, got {k}")
    if max_iters < 1:
        raise ParameterError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, k, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)
        new = d2.argmin(1)
        history.append(float(d2[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = X[labels == j]
            if len(members):
                C[j] = members.mean(0)
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)
    inertia = float(d2[np.arange(n), labels].sum())
    return KMeansResult(C, labels, inertia, history, it)


def image_features(images, size: int = 16) -> np.ndarray:
    """Area-downsample each image to ``size x size`` (channel mean) and flatten."""
    feats = []
    for g in images:
        px = (g.pixels if isinstance(g, ImageGrid) else np.asarray(g, dtype=np.float64))
        if px.ndim == 3:
            px = px.mean(-1)
        h, w = px.shape
        if h % size or w % size:
            raise ParameterError(f"image {h}x{w} cannot be area-downsampled to {size}x{size}")
        feats.append(px.reshape(size, h // size, size, w // size).mean((1, 3)).ravel())
    return np.stack(feats)


def select_style_images(manifest, k: int, per_cluster: int = 1, seed: int = 0) -> list:
    """Paths of the ``per_cluster`` images nearest each K-means centroid.

    Candidates are ranked over the whole manifest by distance to the
    centroid, with ties going to the earlier entry.  An image already taken
    for an earlier cluster is skipped, so a small or singleton cluster still
    yields ``per_cluster`` distinct picks while enough images remain.
    """
    n = len(manifest.entries)
    if k <= 0 or k > n:
        raise ParameterError(f"k must lie in 1..{n}, got {k}")
    if per_cluster not in (1, 2, 3):
        raise ParameterError("per_cluster must be 1, 2 or 3")
    X = image_features(manifest.load_images())
    res = kmeans(X, k, seed)
    chosen: list[int] = []
    taken = set()
    index = np.arange(n)
    for j in range(k):
        d = ((X - res.centroids[j]) ** 2).sum(1)
        picked = 0
        for i in np.lexsort((index, d)):  # primary: distance, secondary: manifest index
            if picked == per_cluster:
                break
            if int(i) not in taken:
                taken.add(int(i))
                chosen.append(int(i))
                picked += 1
    return [manifest.entries[i].path for i in chosen]
