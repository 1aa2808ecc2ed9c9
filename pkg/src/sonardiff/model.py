"""Model bundle and the checkpoint container.

A checkpoint is a single ``.npz`` file.  Every parameter is stored under
``param/<dotted name>`` with its own dtype and shape; the reserved entry
``__meta__`` holds a UTF-8 JSON record::

    {
      "format_version": 1,
      "config":  {"codec": {...}, "schedule": {...}, "denoiser": {...}, "text": {...}},
      "vocab":   ["<pad>", "<unk>", ...],
      "meta":    {"phase": 2, "step": 2000, "merged_adapters": [...], ...},
      "arrays":  {"<name>": {"dtype": "float32", "shape": [...]}}
    }

Reloading restores every parameter bit for bit.
"""

from __future__ import annotations

import copy
import hashlib
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import SpaceToDepthCodec
from .conditioning import Conditioner, TextEncoder, Vocabulary
from .denoiser import Denoiser, DenoiserConfig
from .errors import ConfigurationError, ValidationError
from .schedule import NoiseSchedule, make_linear_schedule, schedule_from_config

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    arrays: dict
    config: dict
    vocab: list
    meta: dict = field(default_factory=dict)

    def digest(self, prefix: str = "") -> str:
        return array_digest({k: v for k, v in self.arrays.items() if k.startswith(prefix)})

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {
            "format_version": FORMAT_VERSION,
            "config": self.config,
            "vocab": self.vocab,
            "meta": self.meta,
            "arrays": {k: {"dtype": str(v.dtype), "shape": list(v.shape)} for k, v in self.arrays.items()},
        }
        payload = {f"param/{k}": v for k, v in self.arrays.items()}
        payload["__meta__"] = np.frombuffer(json.dumps(record, sort_keys=True).encode(), dtype=np.uint8)
        return write_npz(path, payload)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"checkpoint not found: {path}")
        with np.load(path, allow_pickle=False) as data:
            if "__meta__" not in data:
                raise ValidationError(f"{path} is not a checkpoint (no __meta__ record)")
            record = json.loads(bytes(data["__meta__"]).decode())
            if record.get("format_version") != FORMAT_VERSION:
                raise ValidationError(f"unsupported checkpoint format {record.get('format_version')}")
            arrays = {k[len("param/"):]: np.array(data[k]) for k in data.files if k.startswith("param/")}
        for name, spec in record["arrays"].items():
            a = arrays.get(name)
            if a is None or str(a.dtype) != spec["dtype"] or list(a.shape) != spec["shape"]:
                raise ValidationError(f"array {name!r} does not match its metadata")
        return cls(arrays, record["config"], record["vocab"], record.get("meta", {}))


def write_npz(path, arrays: dict) -> Path:
    """Write an ``.npz`` archive atomically with fixed zip timestamps.

    ``np.savez`` stamps each member with the current time, which would make
    otherwise identical runs produce different bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arrays[name]), allow_pickle=False)
    tmp.replace(path)
    return path


def array_digest(arrays: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def state_arrays(module: torch.nn.Module, prefix: str) -> dict:
    return {f"{prefix}{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


class SonarModel:
    """Codec, schedule, denoiser and text conditioning that travel together."""

    def __init__(
        self,
        codec: SpaceToDepthCodec | None = None,
        schedule: NoiseSchedule | None = None,
        denoiser: Denoiser | None = None,
        conditioner: Conditioner | None = None,
        phase: int = 2,
    ):
        self.codec = codec or SpaceToDepthCodec()
        self.schedule = schedule or make_linear_schedule()
        if denoiser is None:
            denoiser = Denoiser(DenoiserConfig(latent_channels=self.codec.latent_channels))
        self.denoiser = denoiser
        if conditioner is None:
            vocab = Vocabulary()
            conditioner = Conditioner(vocab, TextEncoder(len(vocab), denoiser.config.d_cond))
        self.conditioner = conditioner
        self.phase = phase
        self.meta: dict = {}

    @classmethod
    def create(cls, corpus=(), seed: int = 0, denoiser_config: DenoiserConfig | None = None,
               codec: SpaceToDepthCodec | None = None, schedule: NoiseSchedule | None = None,
               max_len: int = 77) -> "SonarModel":
        codec = codec or SpaceToDepthCodec()
        cfg = denoiser_config or DenoiserConfig(latent_channels=codec.latent_channels)
        if cfg.latent_channels != codec.latent_channels:
            raise ConfigurationError("denoiser latent channels do not match the codec")
        torch.manual_seed(seed)
        vocab = Vocabulary.build(corpus)
        denoiser = Denoiser(cfg)
        encoder = TextEncoder(len(vocab), cfg.d_cond, max_len)
        return cls(codec, schedule, denoiser, Conditioner(vocab, encoder))

    @property
    def vocab(self) -> Vocabulary:
        return self.conditioner.vocab

    @property
    def text_encoder(self) -> TextEncoder:
        return self.conditioner.encoder

    def parameters(self):
        yield from self.denoiser.parameters()
        yield from self.text_encoder.parameters()

    def train(self, flag: bool = True):
        self.denoiser.train(flag)
        self.text_encoder.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def to_dtype(self, dtype):
        self.denoiser.to(dtype)
        self.text_encoder.to(dtype)
        return self

    def extend_vocab(self, corpus, seed: int = 0) -> int:
        added = self.vocab.extend(corpus)
        if added:
            gen = torch.Generator().manual_seed(seed)
            self.text_encoder.resize(len(self.vocab), generator=gen)
        return added

    def config(self) -> dict:
        enc = self.text_encoder
        return {
            "codec": self.codec.config(),
            "schedule": self.schedule.config(),
            "denoiser": self.denoiser.config.to_dict(),
            "text": {"vocab_size": enc.vocab_size, "d_cond": enc.d_cond, "max_len": enc.max_len},
        }

    def to_checkpoint(self, **meta) -> Checkpoint:
        arrays = state_arrays(self.denoiser, "denoiser.")
        if any(".adapter." in k for k in arrays):
            raise ConfigurationError("runtime adapters are attached; merge or remove them before saving")
        arrays.update(state_arrays(self.text_encoder, "text."))
        m = {"phase": self.phase, "merged_adapters": []}
        m.update(self.meta)
        m.update(meta)
        return Checkpoint(arrays, self.config(), self.vocab.to_list(), m)

    def save(self, path, **meta) -> Path:
        return self.to_checkpoint(**meta).save(path)

    @classmethod
    def from_checkpoint(cls, ckpt) -> "SonarModel":
        if not isinstance(ckpt, Checkpoint):
            ckpt = Checkpoint.load(ckpt)
        cfg = ckpt.config
        codec_cfg = cfg["codec"]
        codec = SpaceToDepthCodec(codec_cfg["block"], codec_cfg["channels"])
        schedule = schedule_from_config(cfg["schedule"])
        denoiser = Denoiser(DenoiserConfig.from_dict(cfg["denoiser"]))
        text = cfg["text"]
        encoder = TextEncoder(text["vocab_size"], text["d_cond"], text["max_len"])
        _load_state(denoiser, ckpt.arrays, "denoiser.")
        _load_state(encoder, ckpt.arrays, "text.")
        vocab = Vocabulary.from_list(ckpt.vocab)
        model = cls(codec, schedule, denoiser, Conditioner(vocab, encoder), phase=ckpt.meta.get("phase", 2))
        model.meta = {k: copy.deepcopy(v) for k, v in ckpt.meta.items() if k in ("merged_adapters", "latent_hw")}
        return model.eval()

    @classmethod
    def load(cls, path) -> "SonarModel":
        return cls.from_checkpoint(Checkpoint.load(path))


def _load_state(module: torch.nn.Module, arrays: dict, prefix: str):
    state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
    expected = module.state_dict()
    if set(state) != set(expected):
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        raise ValidationError(f"checkpoint parameters mismatch (missing={missing}, unexpected={extra})")
    for k, v in state.items():
        if tuple(v.shape) != tuple(expected[k].shape):
            raise ValidationError(f"parameter {prefix}{k} has shape {tuple(v.shape)}, expected {tuple(expected[k].shape)}")
    module.to(next(iter(state.values())).dtype)
    module.load_state_dict(state)
