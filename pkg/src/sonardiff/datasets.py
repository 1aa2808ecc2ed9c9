"""Dataset manifests, deterministic splits and the toy side-scan sonar generator."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .codec import ImageGrid, load_png, save_png
from .errors import IngestionError, ParameterError, StratificationError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SOURCES = ("real", "simulated", "style_injected", "generated")
TOY_LABELS = ("ship", "plane", "mine", "seafloor")

# label -> (object tag prefix, shape kind, word used in captions)
_OBJECTS = {
    "ship": ("SH", "ellipse", "ship"),
    "plane": ("PL", "cross", "plane"),
    "mine": ("CYM", "bar", "mine"),
}
# three size variants per object; the tag number names the variant
_VARIANTS = {
    "ship": [(34, 1.0), (33, 0.85), (17, 1.15)],
    "plane": [(71, 1.0), (12, 0.85), (5, 1.15)],
    "mine": [(3, 1.0), (8, 0.85), (21, 1.15)],
}
# six seafloor environments: (tag, reflectivity, ripple amplitude)
_SEAFLOORS = [
    ("AP238*", 0.30, 0.00),
    ("AP637*", 0.24, 0.00),
    ("AS25*", 0.32, 0.06),
    ("AS61*", 0.27, 0.06),
    ("SEF4*", 0.22, 0.03),
    ("SEF12*", 0.35, 0.03),
]


@dataclass
class ManifestEntry:
    path: str
    label: str
    source: str
    caption: str | None = None
    caption_low: str | None = None
    caption_high: str | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class DatasetManifest:
    entries: list
    labels: list
    version: int = 1
    root: Path = field(default_factory=Path.cwd)
    failures: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load_images(self) -> list[ImageGrid]:
        missing = [e.path for e in self.entries if not self.resolve(e).is_file()]
        if missing:
            raise IngestionError("missing image files", missing)
        return [load_png(self.resolve(e)) for e in self.entries]

    def with_entries(self, entries, **changes) -> "DatasetManifest":
        kw = dict(entries=list(entries), labels=list(self.labels), version=self.version, root=self.root)
        kw.update(changes)
        return DatasetManifest(**kw)

    def label_counts(self) -> dict:
        out = {label: 0 for label in self.labels}
        for e in self.entries:
            out[e.label] = out.get(e.label, 0) + 1
        return out

    def validate(self, check_files: bool = True):
        problems = []
        seen = set()
        for e in self.entries:
            if e.path in seen:
                problems.append(f"duplicate path {e.path}")
            seen.add(e.path)
            if e.label not in self.labels:
                problems.append(f"unknown label {e.label!r} at {e.path}")
            if e.source not in SOURCES:
                problems.append(f"unknown source {e.source!r} at {e.path}")
            if check_files and not self.resolve(e).is_file():
                problems.append(f"missing file {e.path}")
        if problems:
            raise IngestionError("invalid manifest", problems)
        return self

    def to_dict(self, root: Path | None = None) -> dict:
        root = Path(root) if root is not None else self.root
        entries = []
        for e in self.entries:
            d = e.to_dict()
            d["path"] = os.path.relpath(self.resolve(e), root).replace(os.sep, "/")
            entries.append(d)
        out = {"schema_version": SCHEMA_VERSION, "version": self.version, "labels": list(self.labels),
               "entries": entries}
        if self.failures:
            out["failures"] = self.failures
        return out

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(path.parent.resolve()), indent=1) + "\n")
        tmp.replace(path)
        return path


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise IngestionError("manifest file not found", [path])
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise IngestionError(f"manifest {path} is not valid JSON ({exc})") from exc
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise IngestionError(f"unsupported manifest schema {raw.get('schema_version')!r}")
    bad = [i for i, e in enumerate(raw.get("entries", [])) if not {"path", "label", "source"} <= set(e)]
    if bad:
        raise IngestionError("entries missing path/label/source", [f"entry {i}" for i in bad])
    known = {f for f in ManifestEntry.__dataclass_fields__}
    entries = []
    for e in raw["entries"]:
        extra = set(e) - known
        if extra:
            raise IngestionError(f"unknown entry fields {sorted(extra)}", [e["path"]])
        entries.append(ManifestEntry(**e))
    m = DatasetManifest(entries, list(raw["labels"]), int(raw.get("version", 1)), path.parent.resolve(),
                        list(raw.get("failures", [])))
    return m.validate(check_files)


# -- splits ----------------------------------------------------------------


def _allocate(n: int, fractions) -> list[int]:
    """Largest-remainder allocation of ``n`` items over ``fractions``."""
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(manifest: DatasetManifest, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Label-stratified, seed-deterministic partition into len(ratios) manifests.

    Each label's entries are shuffled and spread evenly over a shared ranking,
    which is then cut at the globally allocated sizes.  Part sizes are
    therefore exact and each label lands in every part in proportion.
    """
    ratios = [float(r) for r in ratios]
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError("split ratios must be positive and sum to 1")
    rng = np.random.default_rng(seed)
    by_label: dict[str, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        by_label.setdefault(e.label, []).append(i)
    small = [label for label, idx in by_label.items() if len(idx) < len(ratios)]
    if small:
        raise StratificationError(f"labels with fewer than {len(ratios)} entries: {sorted(small)}")
    keyed = []
    for label in sorted(by_label):
        idx = by_label[label]
        perm = rng.permutation(len(idx))
        for rank, j in enumerate(perm):
            keyed.append(((rank + 0.5) / len(idx), label, idx[j]))
    keyed.sort()
    sizes = _allocate(len(manifest.entries), ratios)
    parts, start = [], 0
    for size in sizes:
        chosen = sorted(k[2] for k in keyed[start:start + size])
        parts.append(manifest.with_entries([manifest.entries[i] for i in chosen]))
        start += size
    return tuple(parts)


# -- toy generator ---------------------------------------------------------


def _target_mask(kind: str, cx: float, cy: float, angle: float, scale: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    if kind == "ellipse":
        return (u / (7.0 * scale)) ** 2 + (v / (2.8 * scale)) ** 2 <= 1.0
    if kind == "cross":
        fuselage = (np.abs(u) <= 6.5 * scale) & (np.abs(v) <= 1.1 * scale)
        wings = (np.abs(v) <= 6.0 * scale) & (np.abs(u - 1.5 * scale) <= 1.1 * scale)
        return fuselage | wings
    if kind == "bar":
        return (np.abs(u) <= 3.6 * scale) & (np.abs(v) <= 1.7 * scale)
    raise ParameterError(f"unknown target shape {kind!r}")


def _shadow_mask(target: np.ndarray, direction: float, length: int) -> np.ndarray:
    dx, dy = np.cos(direction), np.sin(direction)
    shadow = np.zeros_like(target)
    for k in range(1, length + 1):
        shadow |= ndimage.shift(target.astype(float), (k * dy, k * dx), order=0, mode="constant", cval=0) > 0.5
    return shadow & ~target


def render_toy_image(params: dict, rng: np.random.Generator, size: int = 32, looks: int = 4,
                     target_looks: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Compose one toy image from its parameters; returns (pixels, target mask).

    Speckle is the mean of ``looks`` unit exponential draws (``target_looks``
    on the target, whose strong return averages more independent scatterers).
    """
    refl = np.full((size, size), params["background"])
    if params["ripple"]:
        xx = np.arange(size)[None, :]
        refl = refl + params["ripple"] * np.sin(2 * np.pi * xx / 6.0 + params["ripple_phase"])
    target = np.zeros((size, size), dtype=bool)
    if params["shape"] is not None:
        target = _target_mask(params["shape"], params["cx"], params["cy"], params["angle"], params["scale"], size)
        shadow = _shadow_mask(target, params["shadow_dir"], params["shadow_len"])
        refl = np.where(shadow, 0.04, refl)
        refl = np.where(target, 0.95, refl)
    speckle = rng.exponential(1.0, size=(looks, size, size)).mean(axis=0)
    target_speckle = rng.exponential(1.0, size=(target_looks, size, size)).mean(axis=0)
    speckle = np.where(target, target_speckle, speckle)
    px = np.clip(refl * speckle, 0.0, 1.0)
    return px, target


def bright_blob_centroid(px, sigma: float = 1.0, level: float = 0.3):
    """Centroid (x, y) of the largest bright connected region, or None.

    The image is smoothed and thresholded at ``median + level * (max - median)``;
    the centroid weights pixels above the median over the (one pixel dilated)
    largest component.
    """
    px = np.asarray(getattr(px, "pixels", px), dtype=np.float64)
    if px.ndim == 3:
        px = px.mean(axis=2)
    sm = ndimage.gaussian_filter(px, sigma)
    med, top = float(np.median(sm)), float(sm.max())
    if top - med < 0.2:
        return None
    labels, n = ndimage.label(sm > med + level * (top - med))
    if n == 0:
        return None
    sizes = ndimage.sum(np.ones_like(sm), labels, index=range(1, n + 1))
    region = ndimage.binary_dilation(labels == int(np.argmax(sizes)) + 1)
    weights = np.clip(px - np.median(px), 0.0, None) * region
    if weights.sum() <= 0:
        return None
    cy, cx = ndimage.center_of_mass(weights)
    return float(cx), float(cy)


def toy_caption(label: str, variant_tag: str | None, seafloor_tag: str) -> str:
    if label in _OBJECTS:
        return f"image of {variant_tag} {_OBJECTS[label][2]} on the {seafloor_tag} seabed"
    return f"image of the {seafloor_tag} seabed"


def _sample_params(label: str, rng: np.random.Generator, size: int) -> dict:
    floor_tag, background, ripple = _SEAFLOORS[int(rng.integers(len(_SEAFLOORS)))]
    p = {
        "label": label,
        "seafloor_tag": floor_tag,
        "background": background,
        "ripple": ripple,
        "ripple_phase": float(rng.uniform(0, 2 * np.pi)),
        "shape": None,
    }
    if label in _OBJECTS:
        prefix, shape, _ = _OBJECTS[label]
        number, scale = _VARIANTS[label][int(rng.integers(3))]
        margin = 10.0 * size / 32.0
        p.update(
            shape=shape,
            variant_tag=f"{prefix}{number}*",
            scale=scale,
            cx=float(rng.uniform(margin, size - margin)),
            cy=float(rng.uniform(margin, size - margin)),
            angle=float(rng.uniform(0, np.pi)),
            # side-scan geometry: shadow points away from the track, left or right
            shadow_dir=float((0.0 if rng.random() < 0.5 else np.pi) + rng.uniform(-0.3, 0.3)),
            shadow_len=int(rng.integers(3, 7)),
        )
    return p


def generate_toy_sonar(n: int, seed: int, out_dir, class_mix: dict | None = None, size: int = 32,
                       source: str = "real") -> DatasetManifest:
    """Write ``n`` toy sonar PNGs, ``manifest.json`` and ``params.jsonl`` under ``out_dir``.

    Label counts follow ``class_mix`` exactly (largest remainder).  Each
    image gets speckled seafloor, an optional bright class-shaped target and
    its acoustic shadow.  The parameter log holds the ground truth used by
    oracle checks (target centroid, pixel count, ...).
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    class_mix = dict(class_mix or {label: 1.0 / len(TOY_LABELS) for label in TOY_LABELS})
    if any(f < 0 for f in class_mix.values()) or abs(sum(class_mix.values()) - 1.0) > 1e-9:
        raise ParameterError("class_mix fractions must be non-negative and sum to 1")
    unknown = set(class_mix) - set(TOY_LABELS)
    if unknown:
        raise ParameterError(f"unknown toy labels {sorted(unknown)}")
    if source not in SOURCES:
        raise ParameterError(f"unknown source {source!r}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    labels = [label for label in TOY_LABELS if label in class_mix]
    counts = _allocate(n, [class_mix[label] for label in labels])
    rng = np.random.default_rng(seed)
    sequence = np.array([label for label, c in zip(labels, counts) for _ in range(c)])
    sequence = sequence[rng.permutation(n)]

    entries, log_records = [], []
    for i, label in enumerate(sequence):
        label = str(label)
        params = _sample_params(label, rng, size)
        px, target = render_toy_image(params, rng, size)
        rel = f"images/{i:05d}_{label}.png"
        save_png(out / rel, px)
        if target.any():
            ty, tx = ndimage.center_of_mass(target)
            params["target_centroid"] = [float(tx), float(ty)]
        else:
            params["target_centroid"] = None
        params["target_pixels"] = int(target.sum())
        params["path"] = rel
        log_records.append(params)
        caption = toy_caption(label, params.get("variant_tag"), params["seafloor_tag"])
        entries.append(ManifestEntry(rel, label, source, caption=caption))

    with open(out / "params.jsonl", "w") as fh:
        for rec in log_records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = DatasetManifest(entries, list(TOY_LABELS), 1, out.resolve())
    manifest.save(out / "manifest.json")
    return manifest


def read_params_log(out_dir) -> list[dict]:
    with open(Path(out_dir) / "params.jsonl") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- caption dataset -------------------------------------------------------


def build_caption_dataset(manifest: DatasetManifest, gateway, domain_prompt: str | None = None,
                          retries: int = 1, workers: int = 1) -> DatasetManifest:
    """Attach low- and high-level captions to every entry.

    Entries whose image cannot be read or whose gateway calls keep failing
    after ``retries`` extra attempts are dropped from the result and listed
    in ``failures``; the batch itself never aborts.
    """
    from .gateway import DOMAIN_PROMPT, Gateway

    gw = gateway if isinstance(gateway, Gateway) else Gateway(gateway)
    prompt = domain_prompt or DOMAIN_PROMPT

    def caption_one(entry):
        last = None
        for _ in range(retries + 1):
            try:
                img = load_png(manifest.resolve(entry))
                low = gw.describe_low_level(img, prompt, caption=entry.caption)
                high = gw.elevate_to_high_level(low)
                return entry, low, high, None
            except Exception as exc:  # recorded per entry, batch continues
                last = exc
        return entry, None, None, last

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(caption_one, manifest.entries))
    else:
        results = [caption_one(e) for e in manifest.entries]

    entries, failures = [], []
    for entry, low, high, err in results:
        if err is not None:
            log.warning("captioning failed for %s: %s", entry.path, err)
            failures.append({"path": entry.path, "error": f"{type(err).__name__}: {err}"})
            continue
        entries.append(ManifestEntry(entry.path, entry.label, entry.source, entry.caption, low, high))
    return manifest.with_entries(entries, version=manifest.version + 1, failures=failures)
