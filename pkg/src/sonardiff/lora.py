"""Low-rank adapters on attention projections.

A projection ``y = x W`` (``W`` of shape in x out) becomes
``y = x W + alpha * (x A) B`` with ``A`` in x r and ``B`` r x out.  Torch
stores linear weights transposed (out x in), so merging adds
``alpha * (A B)^T`` to ``weight``.

Adapter files are ``.npz`` archives with ``A/<layer>/<proj>`` and
``B/<layer>/<proj>`` arrays and a ``__meta__`` JSON record holding
``format_version``, ``base_checkpoint_hash`` and per-target rank/alpha.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, MergeError, ParameterError, ValidationError
from .model import Checkpoint, SonarModel, array_digest, write_npz
from .sampler import TrainConfig, _optimize, load_latents, manifest_prompts

FORMAT_VERSION = 1
PROJECTIONS = ("Q", "K", "V")


class LoraAdapter(nn.Module):
    def __init__(self, A: torch.Tensor, B: torch.Tensor, alpha: float = 1.0, target: tuple | None = None):
        super().__init__()
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
            raise ParameterError(f"A {tuple(A.shape)} and B {tuple(B.shape)} do not chain")
        r = A.shape[1]
        if r < 1 or r > min(A.shape[0], B.shape[1]):
            raise ParameterError(f"rank {r} exceeds min({A.shape[0]}, {B.shape[1]})")
        if target is not None:
            target = (str(target[0]), str(target[1]))
            if target[1] not in PROJECTIONS:
                raise ParameterError(f"projection must be one of {PROJECTIONS}")
        self.A = nn.Parameter(A.clone())
        self.B = nn.Parameter(B.clone())
        self.alpha = float(alpha)
        self.target = target

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape[0], self.B.shape[1]

    def update(self, x):
        return self.alpha * ((x @ self.A) @ self.B)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"target": self.target, "alpha": self.alpha}).encode())
        for p in (self.A, self.B):
            h.update(p.detach().cpu().numpy().astype(np.float64).tobytes())
        return h.hexdigest()


def init_adapter(m: int, n: int, r: int = 4, alpha: float = 1.0, seed: int = 0, target=None,
                 dtype=torch.float32) -> LoraAdapter:
    """Fresh adapter: ``A ~ N(0, 0.01^2)`` from ``seed`` and ``B = 0``."""
    if m < 1 or n < 1 or r < 1:
        raise ParameterError("m, n and r must be positive")
    if r > min(m, n):
        raise ParameterError(f"rank {r} exceeds min({m}, {n})")
    gen = torch.Generator().manual_seed(seed)
    A = torch.randn(m, r, generator=gen, dtype=torch.float64).mul_(0.01).to(dtype)
    B = torch.zeros(r, n, dtype=dtype)
    return LoraAdapter(A, B, alpha, target)


def delta_weight(adapter: LoraAdapter) -> np.ndarray:
    A = adapter.A.detach().cpu().numpy().astype(np.float64)
    B = adapter.B.detach().cpu().numpy().astype(np.float64)
    return A @ B


class LoRALinear(nn.Module):
    """A frozen linear projection with one additive low-rank branch."""

    def __init__(self, base: nn.Linear, adapter: LoraAdapter):
        super().__init__()
        self.base = base
        self.adapter = adapter

    @property
    def weight(self):
        return self.base.weight

    def forward(self, x):
        y = self.base(x)
        if self.adapter.alpha == 0.0:
            return y
        return y + self.adapter.update(x).to(y.dtype)


def _attr(proj: str) -> str:
    return {"Q": "to_q", "K": "to_k", "V": "to_v"}[proj]


def apply_adapter(layer, adapter: LoraAdapter):
    """Wrap the targeted projection of ``layer`` in place and return the layer."""
    if adapter.target is None:
        raise ConfigurationError("adapter has no target")
    layer_id, proj = adapter.target
    if layer_id != layer.layer_id:
        raise ConfigurationError(f"adapter targets {layer_id!r}, layer is {layer.layer_id!r}")
    current = getattr(layer, _attr(proj))
    if isinstance(current, LoRALinear):
        raise ConfigurationError(f"{layer_id}.{proj} already carries an adapter")
    if (current.in_features, current.out_features) != adapter.shape:
        raise ConfigurationError(
            f"adapter shape {adapter.shape} does not match projection "
            f"({current.in_features}, {current.out_features}) of {layer_id}.{proj}"
        )
    adapter.to(current.weight.dtype)
    setattr(layer, _attr(proj), LoRALinear(current, adapter))
    return layer


def apply_adapters(denoiser, adapters) -> None:
    layers = denoiser.attention_layers
    for ad in adapters:
        if ad.target is None or ad.target[0] not in layers:
            raise ConfigurationError(f"adapter target {ad.target} is not an attention layer")
        apply_adapter(layers[ad.target[0]], ad)


def remove_adapters(denoiser) -> list[LoraAdapter]:
    """Unwrap every adapted projection; returns the detached adapters."""
    removed = []
    for layer in denoiser.attention_layers.values():
        for proj in PROJECTIONS:
            mod = getattr(layer, _attr(proj))
            if isinstance(mod, LoRALinear):
                setattr(layer, _attr(proj), mod.base)
                removed.append(mod.adapter)
    return removed


def default_adapters(denoiser, rank: int = 4, alpha: float = 1.0, seed: int = 0, layers=None,
                     projections=PROJECTIONS) -> list[LoraAdapter]:
    """One adapter per Q/K/V projection of the cross-attention layers (or ``layers``)."""
    all_layers = denoiser.attention_layers
    if layers is None:
        layers = [lid for lid, l in all_layers.items() if l.kind == "cross"]
    out = []
    for i, lid in enumerate(layers):
        if lid not in all_layers:
            raise ConfigurationError(f"unknown attention layer {lid!r}")
        layer = all_layers[lid]
        for j, proj in enumerate(projections):
            lin = layer.projection(proj)
            if isinstance(lin, LoRALinear):
                lin = lin.base
            out.append(init_adapter(lin.in_features, lin.out_features, rank, alpha,
                                    seed=seed * 1000 + i * 10 + j, target=(lid, proj),
                                    dtype=lin.weight.dtype))
    return out


def base_digest(model: SonarModel) -> str:
    """Hash of the base parameters, ignoring any attached adapters."""
    arrays = {}
    for prefix, module in (("denoiser.", model.denoiser), ("text.", model.text_encoder)):
        for k, v in module.state_dict().items():
            if ".adapter." in k:
                continue
            arrays[prefix + k.replace(".base.", ".")] = v.detach().cpu().numpy()
    return array_digest(arrays)


def _as_model(base) -> SonarModel:
    if isinstance(base, SonarModel):
        return base
    return SonarModel.from_checkpoint(base if isinstance(base, Checkpoint) else Checkpoint.load(base))


@dataclass
class LoraResult:
    adapters: list
    losses: list = field(default_factory=list)
    base_hash: str = ""
    model: SonarModel | None = None


def train_lora(base_checkpoint, manifest, adapters, train_cfg: TrainConfig | None = None) -> LoraResult:
    """Optimize only the adapter matrices on ``manifest``.

    Words unseen by the base vocabulary map to the unknown token, because
    growing the embedding table would change base parameters.  The default
    configuration uses Adam: adapter gradients start tiny (``B = 0`` and a
    small ``A``), and plain SGD barely moves them.
    """
    cfg = train_cfg or TrainConfig(total_steps=200, snapshot_every=200, optimizer="adam")
    adapters = list(adapters)
    if not adapters:
        raise ConfigurationError("no adapters to train")
    model = _as_model(base_checkpoint)
    before = base_digest(model)
    for p in model.parameters():
        p.requires_grad_(False)
    remove_adapters(model.denoiser)
    apply_adapters(model.denoiser, adapters)
    params = []
    for ad in adapters:
        for p in ad.parameters():
            p.requires_grad_(True)
            params.append(p)

    prompts = manifest_prompts(manifest, cfg.prompt_source)
    latents = load_latents(manifest, model.codec, dtype=next(model.denoiser.parameters()).dtype)
    prompt_ids = [model.conditioner.ids(p) for p in prompts]
    losses = _optimize(model, latents, prompt_ids, cfg, params) if cfg.total_steps > 0 else []
    after = base_digest(model)
    if after != before:
        raise ValidationError("base parameters changed during adapter training")
    return LoraResult(adapters, losses, before, model)


def merge(base_checkpoint, adapters) -> Checkpoint:
    """Fold ``alpha * A B`` into each targeted projection weight.

    The returned checkpoint lists each merged adapter fingerprint under
    ``meta["merged_adapters"]``; merging the same adapter again raises.
    """
    ckpt = base_checkpoint
    if isinstance(ckpt, SonarModel):
        ckpt = ckpt.to_checkpoint()
    elif not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    adapters = list(adapters)
    if not adapters:
        return Checkpoint(dict(ckpt.arrays), ckpt.config, list(ckpt.vocab), dict(ckpt.meta))
    merged_before = list(ckpt.meta.get("merged_adapters", []))
    model = SonarModel.from_checkpoint(ckpt)
    layers = model.denoiser.attention_layers
    new_prints = []
    for ad in adapters:
        fp = ad.fingerprint()
        if fp in merged_before or fp in new_prints:
            raise MergeError(f"adapter {ad.target} is already merged into this checkpoint")
        if ad.target is None or ad.target[0] not in layers:
            raise ConfigurationError(f"adapter target {ad.target} is not an attention layer")
        lin = layers[ad.target[0]].projection(ad.target[1])
        if isinstance(lin, LoRALinear):
            raise ConfigurationError("cannot merge into a projection that carries a runtime adapter")
        if (lin.in_features, lin.out_features) != ad.shape:
            raise ConfigurationError(f"adapter shape {ad.shape} does not match {ad.target}")
        with torch.no_grad():
            w = lin.weight.detach().to(torch.float64) + ad.alpha * torch.from_numpy(delta_weight(ad)).T
            lin.weight.copy_(w.to(lin.weight.dtype))
        new_prints.append(fp)
    out = model.to_checkpoint()
    meta = dict(ckpt.meta)
    meta["merged_adapters"] = merged_before + new_prints
    return Checkpoint(out.arrays, out.config, out.vocab, meta)


def save_adapters(path, adapters, base_checkpoint_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload, targets = {}, []
    for ad in adapters:
        if ad.target is None:
            raise ConfigurationError("cannot save an adapter without a target")
        key = f"{ad.target[0]}/{ad.target[1]}"
        payload[f"A/{key}"] = ad.A.detach().cpu().numpy()
        payload[f"B/{key}"] = ad.B.detach().cpu().numpy()
        targets.append({"layer": ad.target[0], "projection": ad.target[1], "rank": ad.rank, "alpha": ad.alpha})
    ranks = sorted({t["rank"] for t in targets})
    alphas = sorted({t["alpha"] for t in targets})
    record = {
        "format_version": FORMAT_VERSION,
        "base_checkpoint_hash": base_checkpoint_hash,
        "rank": ranks[0] if len(ranks) == 1 else ranks,
        "alpha": alphas[0] if len(alphas) == 1 else alphas,
        "targets": targets,
    }
    payload["__meta__"] = np.frombuffer(json.dumps(record, sort_keys=True).encode(), dtype=np.uint8)
    return write_npz(path, payload)


def load_adapters(path) -> tuple[list[LoraAdapter], dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"adapter file not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise ValidationError(f"{path} is not an adapter file")
        record = json.loads(bytes(data["__meta__"]).decode())
        if record.get("format_version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported adapter format {record.get('format_version')}")
        adapters = []
        for t in record["targets"]:
            key = f"{t['layer']}/{t['projection']}"
            A = torch.from_numpy(np.array(data[f"A/{key}"]))
            B = torch.from_numpy(np.array(data[f"B/{key}"]))
            adapters.append(LoraAdapter(A, B, t["alpha"], (t["layer"], t["projection"])))
    return adapters, record
