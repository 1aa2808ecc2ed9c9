"""Image metrics, the toy feature extractor, and the classification harness.

SSIM here is the global form computed over whole images (no sliding
window).  FID and IS are measured in the feature and label space of a
small convolutional classifier trained on the toy corpus, so their values
are only comparable within this package.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .codec import ImageGrid
from .model import write_npz
from .errors import ConfigurationError, NumericalError, ParameterError, ShapeError, ValidationError

log = logging.getLogger(__name__)

REAL_SOURCES = ("real", "simulated")
SYNTHETIC_SOURCES = ("style_injected", "generated")
COMBINATIONS = ("real", "synthetic", "real+synthetic")


def _pixels(x, data_range):
    if isinstance(x, ImageGrid):
        return x.pixels, 1.0
    return np.asarray(x, dtype=np.float64), float(data_range)


def _pair(x, y, data_range):
    a, la = _pixels(x, data_range)
    b, lb = _pixels(y, data_range)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if la != lb:
        raise ValidationError("images use different dynamic ranges")
    return a, b, la


def ssim(x, y, data_range: float = 1.0) -> float:
    """Global SSIM with ``c1 = (0.01 L)^2`` and ``c2 = (0.03 L)^2``.

    ``ImageGrid`` inputs are compared on their normalized pixels with
    ``L = 1``; plain arrays use ``data_range`` as ``L``.  Variances are
    population (1/N) moments.
    """
    a, b, L = _pair(x, y, data_range)
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    mx, my = a.mean(), b.mean()
    da, db = a - mx, b - my
    vx, vy = (da * da).mean(), (db * db).mean()
    cov = (da * db).mean()
    return float(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))


def psnr(x, y, data_range: float = 1.0) -> float:
    """``10 log10(MAX^2 / MSE)``; identical inputs give ``math.inf``."""
    a, b, L = _pair(x, y, data_range)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(L * L / mse)


def _moments(feats):
    X = np.asarray(feats, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ShapeError("features must be an (n, dim) array")
    n, d = X.shape
    if n < d + 1 or n < 2:
        raise ParameterError(f"{n} samples cannot support a {d}-dimensional covariance (need >= {d + 1})")
    return X.mean(0), np.atleast_2d(np.cov(X, rowvar=False, ddof=1))


def _sqrt_psd(S):
    w, V = np.linalg.eigh((S + S.T) / 2.0)
    if w.min() < -1e-8 * max(1.0, abs(w.max())):
        raise NumericalError(f"matrix has a negative eigenvalue {w.min():.3e}")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def fid_from_stats(mu1, s1, mu2, s2) -> float:
    """Frechet distance between two Gaussians.

    ``Tr((S1 S2)^{1/2})`` equals the trace of ``(S1^{1/2} S2 S1^{1/2})^{1/2}``,
    whose argument is symmetric, so both roots come from ``eigh``.
    Eigenvalues below -1e-8 raise; those in [-1e-8, 0] are set to zero.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    s1, s2 = np.atleast_2d(s1), np.atleast_2d(s2)
    if mu1.shape != mu2.shape or s1.shape != s2.shape:
        raise ShapeError("feature dimensions differ")
    r1 = _sqrt_psd(s1)
    M = r1 @ s2 @ r1
    w = np.linalg.eigvalsh((M + M.T) / 2.0)
    if w.min() < -1e-8:
        raise NumericalError(f"covariance product has a negative eigenvalue {w.min():.3e}")
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)
    return max(value, 0.0) if value > -1e-8 else value


def fid(real_features, gen_features) -> float:
    mu1, s1 = _moments(real_features)
    mu2, s2 = _moments(gen_features)
    if mu1.shape != mu2.shape:
        raise ShapeError("feature dimensions differ")
    return fid_from_stats(mu1, s1, mu2, s2)


def inception_score(class_probs) -> float:
    P = np.asarray(class_probs, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ShapeError("class probabilities must be a non-empty (n, classes) array")
    if np.any(P < 0) or np.any(np.abs(P.sum(1) - 1.0) > 1e-6):
        raise ValidationError("every row must be a probability vector")
    py = P.mean(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(P) - np.log(py)), 0.0)
    return float(math.exp(terms.sum(1).mean()))


# -- classifier / extractor ---------------------------------------------------


class ToyClassifier(nn.Module):
    """Two conv blocks, global max pooling, and a linear head.

    Max pooling keeps the response of a small bright target regardless of
    where it sits in the frame, which average pooling dilutes.
    """

    def __init__(self, n_classes: int, in_channels: int = 1, width: int = 16, feature_dim: int = 32):
        super().__init__()
        self.block1 = nn.Sequential(nn.Conv2d(in_channels, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))
        self.block2 = nn.Sequential(nn.Conv2d(width, feature_dim, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))
        self.head = nn.Linear(feature_dim, n_classes)
        self.feature_dim = feature_dim

    def features(self, x):
        return self.block2(self.block1(x)).amax((2, 3))

    def forward(self, x):
        return self.head(self.features(x))


def _image_tensor(images) -> torch.Tensor:
    arrs = []
    for g in images:
        px = g.pixels if isinstance(g, ImageGrid) else np.asarray(g, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        arrs.append(px)
    if not arrs:
        raise ParameterError("no images")
    return torch.as_tensor(np.moveaxis(np.stack(arrs), -1, 1), dtype=torch.float32)


@dataclass
class ClassifierConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 3e-3
    width: int = 16
    feature_dim: int = 32


class FeatureExtractor:
    """Frozen classifier used as a deterministic feature map and label posterior."""

    def __init__(self, model: ToyClassifier | None, labels, extractor_id: str = "toy-cnn"):
        self.model = model
        self.labels = list(labels)
        self.id = extractor_id
        if model is not None:
            model.eval()
            for p in model.parameters():
                p.requires_grad_(False)

    @property
    def dim(self) -> int:
        if self.model is None:
            raise ConfigurationError(f"extractor {self.id!r} is not trained")
        return self.model.feature_dim

    def _require(self):
        if self.model is None:
            raise ConfigurationError(f"extractor {self.id!r} is not trained")

    @torch.no_grad()
    def features(self, images) -> np.ndarray:
        self._require()
        return self.model.features(_image_tensor(images)).double().numpy()

    @torch.no_grad()
    def probabilities(self, images) -> np.ndarray:
        self._require()
        p = torch.softmax(self.model(_image_tensor(images)).double(), dim=1).numpy()
        return p / p.sum(1, keepdims=True)

    def predict(self, images) -> list:
        return [self.labels[i] for i in self.probabilities(images).argmax(1)]

    def save(self, path) -> Path:
        self._require()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"param/{k}": v.numpy() for k, v in self.model.state_dict().items()}
        meta = {"id": self.id, "labels": self.labels, "width": self.model.block1[0].out_channels,
                "feature_dim": self.model.feature_dim, "in_channels": self.model.block1[0].in_channels}
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        return write_npz(path, arrays)

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"extractor not found: {path}")
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            state = {k[6:]: torch.from_numpy(np.array(data[k])) for k in data.files if k.startswith("param/")}
        model = ToyClassifier(len(meta["labels"]), meta["in_channels"], meta["width"], meta["feature_dim"])
        model.load_state_dict(state)
        return cls(model, meta["labels"], meta["id"])


def extract_features(images, extractor: FeatureExtractor) -> np.ndarray:
    if extractor is None:
        raise ConfigurationError("no feature extractor given")
    return extractor.features(images)


def train_classifier(images, labels, label_set=None, cfg: ClassifierConfig | None = None,
                     seed: int = 0) -> FeatureExtractor:
    cfg = cfg or ClassifierConfig()
    label_set = list(label_set) if label_set is not None else sorted(set(labels))
    index = {l: i for i, l in enumerate(label_set)}
    try:
        y = torch.tensor([index[l] for l in labels])
    except KeyError as exc:
        raise ConfigurationError(f"label {exc.args[0]!r} is not in the label set") from None
    x = _image_tensor(images)
    torch.manual_seed(seed)
    model = ToyClassifier(len(label_set), x.shape[1], cfg.width, cfg.feature_dim)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(seed)
    n = x.shape[0]
    model.train()
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return FeatureExtractor(model, label_set)


# -- classification harness ---------------------------------------------------


@dataclass
class AccuracyTable:
    classifier: str
    accuracy: dict  # combination -> accuracy or None when no training data
    counts: dict

    def rows(self) -> list[list]:
        head = ["classifier"] + [f"{c} accuracy" for c in COMBINATIONS]
        vals = [self.classifier] + [
            "n/a" if self.accuracy.get(c) is None else f"{self.accuracy[c]:.4f}" for c in COMBINATIONS
        ]
        return [head, vals]

    def to_markdown(self) -> str:
        head, vals = self.rows()
        return "\n".join([
            "| " + " | ".join(head) + " |",
            "|" + "---|" * len(head),
            "| " + " | ".join(vals) + " |",
        ])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.rows())
        return path


def classify_eval(train_manifest, test_manifest, cfg: ClassifierConfig | None = None, seed: int = 0,
                  combinations=COMBINATIONS) -> AccuracyTable:
    """Train one classifier per source combination and score it on the test manifest."""
    train_paths = {str(p) for p in (train_manifest.resolve(e) for e in train_manifest.entries)}
    test_paths = {str(p) for p in (test_manifest.resolve(e) for e in test_manifest.entries)}
    overlap = train_paths & test_paths
    if overlap:
        raise ValidationError(f"train and test manifests are not disjoint ({len(overlap)} shared images)")
    train_labels = {e.label for e in train_manifest.entries}
    test_labels = {e.label for e in test_manifest.entries}
    if train_labels != test_labels:
        raise ConfigurationError(
            f"label sets differ: train-only {sorted(train_labels - test_labels)}, "
            f"test-only {sorted(test_labels - train_labels)}"
        )
    label_set = sorted(train_labels)
    test_images = test_manifest.load_images()
    test_y = [e.label for e in test_manifest.entries]
    groups = {
        "real": set(REAL_SOURCES),
        "synthetic": set(SYNTHETIC_SOURCES),
        "real+synthetic": set(REAL_SOURCES) | set(SYNTHETIC_SOURCES),
    }
    acc, counts = {}, {}
    for combo in combinations:
        if combo not in groups:
            raise ConfigurationError(f"unknown source combination {combo!r}")
        subset = train_manifest.with_entries([e for e in train_manifest.entries if e.source in groups[combo]])
        counts[combo] = len(subset.entries)
        if not subset.entries:
            acc[combo] = None
            continue
        ext = train_classifier(subset.load_images(), [e.label for e in subset.entries], label_set, cfg, seed)
        pred = ext.predict(test_images)
        acc[combo] = float(np.mean([p == t for p, t in zip(pred, test_y)]))
        log.info("%s: accuracy %.4f on %d test images", combo, acc[combo], len(test_y))
    return AccuracyTable("toy-cnn", acc, counts)


# -- report -------------------------------------------------------------------


@dataclass
class MetricsRow:
    label: str
    fid: float | None
    ssim: float
    psnr: float
    inception_score: float
    n_real: int
    n_generated: int


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)  # per class
    aggregate: MetricsRow | None = None
    extractor_id: str = "toy-cnn"

    def validate(self):
        for r in self.rows + ([self.aggregate] if self.aggregate else []):
            if r.fid is not None and r.fid < 0:
                raise ValidationError(f"negative FID for {r.label}")
            if r.inception_score < 1.0 - 1e-9:
                raise ValidationError(f"IS below 1 for {r.label}")
            if not -1.0 <= r.ssim <= 1.0:
                raise ValidationError(f"SSIM outside [-1, 1] for {r.label}")
            if r.n_real <= 0 or r.n_generated <= 0:
                raise ValidationError(f"empty sample for {r.label}")
        return self

    def table(self) -> list[list]:
        def fmt(v):
            if v is None:
                return "n/a"
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            return f"{v:.4f}" if isinstance(v, float) else str(v)

        out = [["class", "FID", "SSIM", "PSNR", "IS", "n_real", "n_generated"]]
        for r in self.rows + ([self.aggregate] if self.aggregate else []):
            out.append([r.label] + [fmt(v) for v in (r.fid, r.ssim, r.psnr, r.inception_score,
                                                    r.n_real, r.n_generated)])
        return out

    def to_dict(self) -> dict:
        def clean(row):
            d = asdict(row)
            return {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}

        return {
            "extractor_id": self.extractor_id,
            "is_reference": "toy classifier label space",
            "rows": [clean(r) for r in self.rows],
            "aggregate": clean(self.aggregate) if self.aggregate else None,
        }

    def save(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{stem}.csv"
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.table())
        json_path = out / f"{stem}.json"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def _paired_fidelity(gen, gen_f, real, real_f):
    """Mean SSIM/PSNR of each generated image against its nearest real image in feature space."""
    d = ((gen_f[:, None, :] - real_f[None, :, :]) ** 2).sum(-1)
    nearest = d.argmin(1)
    s = [ssim(g, real[j]) for g, j in zip(gen, nearest)]
    p = [psnr(g, real[j]) for g, j in zip(gen, nearest)]
    return float(np.mean(s)), float(np.mean(p))


def evaluate(real_by_class: dict, gen_by_class: dict, extractor: FeatureExtractor) -> MetricsReport:
    """Per-class and aggregate FID/SSIM/PSNR/IS.

    Per-class FID is reported as missing when either side has too few
    samples for a full-rank covariance; the aggregate pools every class.
    """
    if not gen_by_class:
        raise ParameterError("no generated images")
    rows = []
    all_real, all_gen, all_rf, all_gf = [], [], [], []
    for label in sorted(gen_by_class):
        gen = list(gen_by_class[label])
        real = list(real_by_class.get(label, []))
        if not gen or not real:
            raise ParameterError(f"class {label!r} needs both real and generated images")
        rf, gf = extractor.features(real), extractor.features(gen)
        try:
            f = fid(rf, gf)
        except ParameterError:
            f = None
        s, p = _paired_fidelity(gen, gf, real, rf)
        is_ = inception_score(extractor.probabilities(gen))
        rows.append(MetricsRow(label, f, s, p, is_, len(real), len(gen)))
        all_real += real
        all_gen += gen
        all_rf.append(rf)
        all_gf.append(gf)
    rf, gf = np.concatenate(all_rf), np.concatenate(all_gf)
    try:
        f = fid(rf, gf)
    except ParameterError:
        f = None
    s = float(np.average([r.ssim for r in rows], weights=[r.n_generated for r in rows]))
    p = float(np.average([r.psnr for r in rows], weights=[r.n_generated for r in rows]))
    agg = MetricsRow("aggregate", f, s, p, inception_score(extractor.probabilities(all_gen)),
                     len(all_real), len(all_gen))
    return MetricsReport(rows, agg, extractor.id).validate()
