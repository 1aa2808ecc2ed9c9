"""Command line driver for every pipeline stage.

Each subcommand reads an optional YAML/JSON run config, lets flags override
it, writes its artifacts into ``--out``, and records two bookkeeping files
there: ``run_config.json`` (the resolved config) and ``produced_files.json``
(path and sha256 of every artifact).  Validation problems exit with code 2.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GatewayError, NumericalError, SonarDiffError, ValidationError

log = logging.getLogger("sonardiff")

SUBCOMMANDS = (
    "make-toy-data", "train-ddpm", "cluster-styles", "stylize", "train-lora", "generate",
    "caption", "finetune", "eval", "classify", "sweep-gamma", "sweep-steps",
)

DEFAULTS = {
    "seed": 0,
    "out_dir": "runs",
    "schedule": {"T": 100, "beta_start": 1e-3, "beta_end": 0.1},
    "denoiser": {"widths": [32, 64, 128], "d_cond": 64, "heads": 1, "time_dim": 64, "groups": 8},
    "sampler": {"num_steps": 50},
    "lora": {"rank": 4, "alpha": 1.0, "layers": None, "projections": ["Q", "K", "V"], "total_steps": 200,
             "learning_rate": 1e-3, "batch_size": 32, "optimizer": "adam"},
    "style": {"gamma": 0.5, "target_layers": None, "timesteps": None, "k": 4, "per_cluster": 1, "count": 8},
    "gateway": {"mode": "stub", "endpoint_url": None, "timeout_ms": 30000, "max_retries": 3, "seed": 0},
    "data": {"n": 256, "size": 32, "class_mix": None},
    "train": {"total_steps": 2000, "batch_size": 32, "learning_rate": 1e-3, "optimizer": "adam", "momentum": 0.9,
              "snapshot_every": 500, "cond_dropout": 0.1, "grid_size": 4},
    "eval": {"per_class": 40, "classifier_epochs": 60, "pairs": 20,
             "gammas": [0.3, 0.5, 0.75, 0.9]},
}


class ConfigError(ValidationError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __getitem__(self, key):
        return self.sections[key]

    @property
    def seed(self) -> int:
        return int(self.sections["seed"])

    @classmethod
    def from_mapping(cls, raw: dict | None) -> "RunConfig":
        merged = copy.deepcopy(DEFAULTS)
        for key, value in (raw or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(key, "unknown config key")
            if isinstance(DEFAULTS[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(key, "must be a mapping")
                for sub, v in value.items():
                    if sub not in DEFAULTS[key]:
                        raise ConfigError(f"{key}.{sub}", "unknown config key")
                    merged[key][sub] = v
            else:
                merged[key] = value
        return cls(merged)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError("--config", f"config file not found: {path}")
        text = path.read_text()
        try:
            if path.suffix.lower() in (".yaml", ".yml"):
                import yaml

                raw = yaml.safe_load(text)
            else:
                raw = json.loads(text)
        except Exception as exc:
            raise ConfigError("--config", f"cannot parse {path}: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError("--config", "top level must be a mapping")
        return cls.from_mapping(raw)

    def override(self, dotted: str, value):
        if value is None:
            return
        if "." in dotted:
            sec, key = dotted.split(".", 1)
            self.sections[sec][key] = value
        else:
            self.sections[dotted] = value

    def to_dict(self) -> dict:
        return copy.deepcopy(self.sections)


# -- helpers ------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _finish(out: Path, cfg: RunConfig, command: str, produced: list[Path]):
    resolved = cfg.to_dict()
    resolved["command"] = command
    _write_json(out / "run_config.json", resolved)
    files = sorted({p.resolve() for p in produced if p.is_file()})
    records = [{"path": str(p.relative_to(out.resolve())) if p.is_relative_to(out.resolve()) else str(p),
                "sha256": _sha256(p), "bytes": p.stat().st_size} for p in files]
    _write_json(out / "produced_files.json", {"command": command, "files": records})


def _files_under(root: Path) -> list[Path]:
    skip = {"run_config.json", "produced_files.json"}
    return sorted(p for p in root.rglob("*") if p.is_file() and p.name not in skip)


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _model(path):
    from .model import SonarModel

    return SonarModel.load(path)


def _sampler_cfg(cfg: RunConfig):
    from .sampler import SamplerConfig

    return SamplerConfig(num_steps=int(cfg["sampler"]["num_steps"]))


def _train_cfg(cfg: RunConfig, prompt_source: str):
    from .sampler import TrainConfig

    t = cfg["train"]
    try:
        return TrainConfig(
            total_steps=int(t["total_steps"]), batch_size=int(t["batch_size"]),
            learning_rate=float(t["learning_rate"]), momentum=float(t["momentum"]),
            optimizer=str(t["optimizer"]), snapshot_every=int(t["snapshot_every"]), seed=cfg.seed, cond_dropout=float(t["cond_dropout"]),
            prompt_source=prompt_source, grid_size=int(t["grid_size"]),
        )
    except SonarDiffError as exc:
        raise ConfigError("train", str(exc)) from exc


def _gateway(cfg: RunConfig, out: Path, mode_flag: str | None = None):
    """Config section first, then GATEWAY_* environment variables, then the flag."""
    import os

    from .gateway import Gateway, GatewayConfig

    kw = {k: v for k, v in cfg["gateway"].items() if v is not None}
    env = {"GATEWAY_MODE": ("mode", str), "GATEWAY_URL": ("endpoint_url", str),
           "GATEWAY_TIMEOUT_MS": ("timeout_ms", int)}
    for var, (key, conv) in env.items():
        if os.environ.get(var):
            try:
                kw[key] = conv(os.environ[var])
            except ValueError:
                raise ConfigError(var, f"invalid value {os.environ[var]!r}") from None
    if mode_flag:
        kw["mode"] = mode_flag
    try:
        gcfg = GatewayConfig(audit_log=str(out / "gateway_audit.jsonl"), **kw)
    except SonarDiffError as exc:
        raise ConfigError("gateway", str(exc)) from exc
    cfg.sections["gateway"].update({k: v for k, v in kw.items()})
    return Gateway(gcfg)


def _label_for_prompt(prompt: str) -> str:
    from .conditioning import parse_tags

    kinds = {"SH": "ship", "PL": "plane", "CYM": "mine"}
    for tag in parse_tags(prompt):
        if tag.prefix in kinds:
            return kinds[tag.prefix]
    return "seafloor"


# -- subcommands --------------------------------------------------------------


def cmd_make_toy_data(args, cfg, out):
    from .datasets import generate_toy_sonar

    d = cfg["data"]
    generate_toy_sonar(int(d["n"]), cfg.seed, out, d["class_mix"], int(d["size"]))
    return _files_under(out)


def cmd_train_ddpm(args, cfg, out, prompt_source="tag"):
    from .datasets import load_manifest
    from .denoiser import DenoiserConfig
    from .model import SonarModel
    from .sampler import manifest_prompts, train_ddpm
    from .schedule import make_linear_schedule

    manifest = load_manifest(args.manifest)
    tcfg = _train_cfg(cfg, prompt_source)
    if prompt_source == "pair":
        manifest_prompts(manifest, "pair")  # refuse early when caption pairs are missing
    if getattr(args, "checkpoint", None):
        model = _model(args.checkpoint)
    else:
        s, dn = cfg["schedule"], cfg["denoiser"]
        schedule = make_linear_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))
        dcfg = DenoiserConfig(4, tuple(dn["widths"]), int(dn["d_cond"]), int(dn["heads"]),
                              int(dn["time_dim"]), int(dn["groups"]))
        model = SonarModel.create(manifest_prompts(manifest, prompt_source), seed=cfg.seed,
                                  denoiser_config=dcfg, schedule=schedule)
    result = train_ddpm(manifest, model, tcfg, out, _sampler_cfg(cfg))
    last = result.checkpoints[-1][1]
    final = out / "model.npz"
    final.write_bytes(Path(last).read_bytes())
    if result.losses:
        head, tail = result.window_means(100)
        _write_json(out / "train_summary.json", {"initial_window_mean": head, "final_window_mean": tail,
                                                 "ratio": tail / head, "steps": len(result.losses)})
    return _files_under(out)


def cmd_finetune(args, cfg, out):
    if not args.checkpoint:
        raise ConfigError("--checkpoint", "finetune starts from an existing checkpoint")
    return cmd_train_ddpm(args, cfg, out, prompt_source="pair")


def cmd_cluster_styles(args, cfg, out):
    from .datasets import load_manifest
    from .style import select_style_images

    manifest = load_manifest(args.manifest)
    st = cfg["style"]
    paths = select_style_images(manifest, int(st["k"]), int(st["per_cluster"]), cfg.seed)
    by_path = {e.path: e for e in manifest.entries}
    styles = [{"path": str(manifest.resolve(by_path[p])), "label": by_path[p].label} for p in paths]
    return [_write_json(out / "styles.json", {"k": st["k"], "per_cluster": st["per_cluster"], "styles": styles})]


def _style_cfg(cfg):
    from .style import StyleBlendConfig

    st = cfg["style"]
    try:
        return StyleBlendConfig(
            gamma=float(st["gamma"]),
            target_layers=set(st["target_layers"]) if st["target_layers"] else None,
            sampler_cfg=_sampler_cfg(cfg),
            timesteps=tuple(st["timesteps"]) if st["timesteps"] else None,
        )
    except SonarDiffError as exc:
        raise ConfigError("style.gamma", str(exc)) from exc


def cmd_stylize(args, cfg, out):
    from .codec import load_png, save_png
    from .datasets import DatasetManifest, ManifestEntry, load_manifest
    from .metrics import psnr, ssim
    from .style import stylize_batch

    if not args.checkpoint:
        raise ConfigError("--checkpoint", "stylize needs a trained checkpoint")
    model = _model(args.checkpoint)
    scfg = _style_cfg(cfg)
    produced = []
    if args.content and args.style:
        content, style = load_png(args.content), load_png(args.style)
        res = stylize_batch([content], [style], scfg, model.codec, model.denoiser, model.schedule)
        img = res.images[0]
        png = save_png(out / "stylized.png", img)
        side = _write_json(out / "stylized.json", {
            "gamma": scfg.gamma, "ssim_vs_content": ssim(img, content), "psnr_vs_content": psnr(img, content),
        })
        return [png, side]
    if not (args.manifest and args.styles):
        raise ConfigError("--content/--style", "give --content and --style, or --manifest and --styles")
    manifest = load_manifest(args.manifest)
    styles = json.loads(Path(args.styles).read_text())["styles"]
    if not styles:
        raise ConfigError("--styles", "style list is empty")
    count = min(int(cfg["style"]["count"]), len(manifest.entries))
    rng = np.random.default_rng(cfg.seed)
    picks = sorted(rng.choice(len(manifest.entries), count, replace=False).tolist())
    contents = [manifest.entries[i] for i in picks]
    style_imgs = [load_png(styles[j % len(styles)]["path"]) for j in range(count)]
    content_imgs = [load_png(manifest.resolve(e)) for e in contents]
    res = stylize_batch(content_imgs, style_imgs, scfg, model.codec, model.denoiser, model.schedule)
    entries, records = [], []
    for j, (entry, img, cimg) in enumerate(zip(contents, res.images, content_imgs)):
        rel = f"images/{j:05d}_{entry.label}.png"
        produced.append(save_png(out / rel, img))
        entries.append(ManifestEntry(rel, entry.label, "style_injected", caption=entry.caption))
        records.append({"path": rel, "content": str(manifest.resolve(entry)),
                        "style": styles[j % len(styles)]["path"], "gamma": scfg.gamma,
                        "ssim_vs_content": ssim(img, cimg), "psnr_vs_content": psnr(img, cimg)})
    m = DatasetManifest(entries, list(manifest.labels), 1, out.resolve())
    produced.append(m.save(out / "manifest.json"))
    produced.append(_write_json(out / "stylized.json", {"records": records}))
    return produced


def cmd_caption(args, cfg, out):
    from .datasets import build_caption_dataset, load_manifest

    manifest = load_manifest(args.manifest)
    gw = _gateway(cfg, out, args.gateway_mode)
    captioned = build_caption_dataset(manifest, gw)
    # keep image paths pointing at the source files
    captioned = captioned.with_entries(
        [type(e)(str(manifest.resolve(e)), e.label, e.source, e.caption, e.caption_low, e.caption_high)
         for e in captioned.entries], failures=captioned.failures)
    path = captioned.save(out / "manifest.json")
    if captioned.failures:
        log.warning("%d entries failed captioning", len(captioned.failures))
    return [path, out / "gateway_audit.jsonl"]


def cmd_train_lora(args, cfg, out):
    from .datasets import load_manifest
    from .lora import default_adapters, merge, remove_adapters, save_adapters, train_lora
    from .sampler import TrainConfig

    model = _model(args.checkpoint)
    base_hash = model.to_checkpoint().digest()
    manifest = load_manifest(args.manifest)
    lc = cfg["lora"]
    adapters = default_adapters(model.denoiser, int(lc["rank"]), float(lc["alpha"]), cfg.seed,
                                lc["layers"], tuple(lc["projections"]))
    steps = int(lc["total_steps"])
    try:
        tcfg = TrainConfig(total_steps=steps, batch_size=int(lc["batch_size"]),
                           learning_rate=float(lc["learning_rate"]), snapshot_every=max(steps, 1), seed=cfg.seed,
                           prompt_source="pair" if all(e.caption_low for e in manifest.entries) else "tag",
                           optimizer=str(lc["optimizer"]))
    except SonarDiffError as exc:
        raise ConfigError("lora", str(exc)) from exc
    res = train_lora(model, manifest, adapters, tcfg)
    produced = [save_adapters(out / "adapters.npz", res.adapters, base_hash)]
    remove_adapters(res.model.denoiser)
    merged = merge(res.model, res.adapters)
    produced.append(merged.save(out / "merged.npz"))
    if res.losses:
        produced.append(_write_json(out / "lora_summary.json", {
            "initial_loss": float(np.mean(res.losses[:10])), "final_loss": float(np.mean(res.losses[-10:])),
            "steps": len(res.losses), "base_checkpoint_hash": base_hash}))
    return produced


def _prompts(args, cfg, out) -> list[str]:
    prompts = list(args.prompt or [])
    if args.prompts_file:
        prompts += [ln.strip() for ln in Path(args.prompts_file).read_text().splitlines() if ln.strip()]
    if not prompts:
        per = int(args.per_class or cfg["eval"]["per_class"])
        gw = _gateway(cfg, out)
        for topic in ("ship", "plane", "mine"):
            prompts += gw.expand_prompts(f"{topic} on the seabed", per)
    return prompts


def cmd_generate(args, cfg, out):
    from .codec import save_png
    from .datasets import DatasetManifest, ManifestEntry, TOY_LABELS
    from .lora import apply_adapters, load_adapters
    from .sampler import sample_grid

    model = _model(args.checkpoint)
    if args.adapters:
        adapters, _ = load_adapters(args.adapters)
        apply_adapters(model.denoiser, adapters)
    prompts = _prompts(args, cfg, out)
    entries, produced = [], []
    batch = 64
    for s in range(0, len(prompts), batch):
        chunk = prompts[s:s + batch]
        imgs = sample_grid(model, chunk, seed=cfg.seed + s, sampler_cfg=_sampler_cfg(cfg))
        for j, (p, px) in enumerate(zip(chunk, imgs)):
            label = _label_for_prompt(p)
            rel = f"images/{s + j:05d}_{label}.png"
            produced.append(save_png(out / rel, px))
            entries.append(ManifestEntry(rel, label, "generated", caption=p))
    m = DatasetManifest(entries, list(TOY_LABELS), 1, out.resolve())
    produced.append(m.save(out / "manifest.json"))
    produced.append(_write_json(out / "generation.json", {"phase": model.phase, "count": len(prompts),
                                                          "checkpoint": str(args.checkpoint)}))
    return produced


def _extractor(args, cfg, manifest, out):
    from .metrics import ClassifierConfig, FeatureExtractor, train_classifier

    if getattr(args, "extractor", None):
        return FeatureExtractor.load(args.extractor)
    ext = train_classifier(manifest.load_images(), [e.label for e in manifest.entries], manifest.labels,
                           ClassifierConfig(epochs=int(cfg["eval"]["classifier_epochs"])), cfg.seed)
    ext.save(out / "extractor.npz")
    return ext


def cmd_eval(args, cfg, out):
    from .datasets import load_manifest
    from .metrics import evaluate

    real = load_manifest(args.real_manifest)
    gen = load_manifest(args.generated_manifest)
    ext = _extractor(args, cfg, real, out)
    real_imgs = dict(zip([e.path for e in real.entries], real.load_images()))
    gen_imgs = gen.load_images()
    real_by, gen_by = {}, {}
    for e in real.entries:
        real_by.setdefault(e.label, []).append(real_imgs[e.path])
    for e, img in zip(gen.entries, gen_imgs):
        gen_by.setdefault(e.label, []).append(img)
    report = evaluate(real_by, gen_by, ext)
    csv_path, json_path = report.save(out)
    print("\n".join(",".join(r) for r in report.table()))
    produced = [csv_path, json_path]
    if (out / "extractor.npz").exists():
        produced.append(out / "extractor.npz")
    return produced


def cmd_classify(args, cfg, out):
    from .datasets import load_manifest
    from .metrics import ClassifierConfig, classify_eval

    train = load_manifest(args.train_manifest)
    for extra in args.extra_manifest or []:
        more = load_manifest(extra)
        from .datasets import ManifestEntry

        train = train.with_entries(
            list(train.entries) + [ManifestEntry(str(more.resolve(e)), e.label, e.source, e.caption)
                                   for e in more.entries])
    test = load_manifest(args.test_manifest)
    table = classify_eval(train, test, ClassifierConfig(epochs=int(cfg["eval"]["classifier_epochs"])), cfg.seed)
    path = table.save(out / "classification.csv")
    md = out / "classification.md"
    md.write_text(table.to_markdown() + "\n")
    print(table.to_markdown())
    return [path, md]


def cmd_sweep_gamma(args, cfg, out):
    import csv

    from .datasets import load_manifest
    from .metrics import psnr, ssim
    from .style import StyleBlendConfig, stylize_batch

    model = _model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    gammas = args.gammas or [float(g) for g in cfg["eval"]["gammas"]]
    pairs = int(cfg["eval"]["pairs"])
    if len(manifest.entries) < 2:
        raise ConfigError("--manifest", "need at least two images to form content/style pairs")
    rng = np.random.default_rng(cfg.seed)
    imgs = manifest.load_images()
    n = len(imgs)
    ci = rng.integers(0, n, pairs)
    si = (ci + rng.integers(1, n, pairs)) % n
    contents = [imgs[i] for i in ci]
    styles = [imgs[i] for i in si]
    base = _style_cfg(cfg)
    rows = [["gamma", "SSIM", "PSNR"]]
    for g in gammas:
        sc = StyleBlendConfig(g, base.target_layers, base.sampler_cfg, base.timesteps)
        res = stylize_batch(contents, styles, sc, model.codec, model.denoiser, model.schedule)
        s = float(np.mean([ssim(a, b) for a, b in zip(res.images, contents)]))
        p = float(np.mean([psnr(a, b) for a, b in zip(res.images, contents)]))
        rows.append([f"{g:g}", f"{s:.4f}", f"{p:.4f}"])
    path = out / "sweep_gamma.csv"
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    print("\n".join(",".join(r) for r in rows))
    return [path]


def cmd_sweep_steps(args, cfg, out):
    from .codec import save_grid
    from .sampler import sample_grid

    run = Path(args.run_dir)
    ckpts = sorted(run.glob("ckpt_*.npz"))
    if not ckpts:
        raise ConfigError("--run-dir", f"no ckpt_*.npz files in {run}")
    prompt = args.prompt[0] if args.prompt else "image of SH34* ship on the AP238* seabed"
    produced, tiles = [], []
    for ck in ckpts:
        model = _model(ck)
        imgs = sample_grid(model, [prompt], seed=cfg.seed, sampler_cfg=_sampler_cfg(cfg))
        produced.append(save_grid(out / f"{ck.stem}.png", imgs))
        tiles.append(imgs[0])
    produced.append(save_grid(out / "steps_grid.png", tiles, ncols=len(tiles)))
    produced.append(_write_json(out / "steps.json", {"prompt": prompt, "checkpoints": [c.name for c in ckpts]}))
    return produced


COMMANDS = {
    "make-toy-data": cmd_make_toy_data,
    "train-ddpm": cmd_train_ddpm,
    "cluster-styles": cmd_cluster_styles,
    "stylize": cmd_stylize,
    "train-lora": cmd_train_lora,
    "generate": cmd_generate,
    "caption": cmd_caption,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "classify": cmd_classify,
    "sweep-gamma": cmd_sweep_gamma,
    "sweep-steps": cmd_sweep_steps,
}


# -- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sonardiff", description="Toy sonar diffusion pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON run config")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("make-toy-data", help="generate the synthetic toy sonar corpus"))
    sp.add_argument("--n", type=int)
    sp.add_argument("--size", type=int)

    for name, helptext in (("train-ddpm", "train the denoiser on tag captions"),
                           ("finetune", "fine-tune a checkpoint on low+high caption pairs")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--checkpoint")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--snapshot-every", type=int)
        sp.add_argument("--lr", type=float)

    sp = common(sub.add_parser("cluster-styles", help="pick style exemplars by K-means"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--per-cluster", type=int)

    sp = common(sub.add_parser("stylize", help="attention-injection style transfer"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--content")
    sp.add_argument("--style")
    sp.add_argument("--manifest", help="content manifest (batch mode)")
    sp.add_argument("--styles", help="styles.json from cluster-styles (batch mode)")
    sp.add_argument("--count", type=int)
    sp.add_argument("--gamma", type=float)

    sp = common(sub.add_parser("train-lora", help="train low-rank adapters on a frozen checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--rank", type=int)
    sp.add_argument("--alpha", type=float)

    sp = common(sub.add_parser("generate", help="sample images from prompts"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt", action="append")
    sp.add_argument("--prompts-file")
    sp.add_argument("--per-class", type=int, help="stub-expanded prompts per object class")
    sp.add_argument("--adapters")

    sp = common(sub.add_parser("caption", help="attach low/high-level captions through the gateway"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--gateway-mode", choices=("stub", "http"))

    sp = common(sub.add_parser("eval", help="FID/SSIM/PSNR/IS report"))
    sp.add_argument("--real-manifest", required=True)
    sp.add_argument("--generated-manifest", required=True)
    sp.add_argument("--extractor")

    sp = common(sub.add_parser("classify", help="real/synthetic classification table"))
    sp.add_argument("--train-manifest", required=True)
    sp.add_argument("--extra-manifest", action="append", help="additional (e.g. synthetic) training manifest")
    sp.add_argument("--test-manifest", required=True)

    sp = common(sub.add_parser("sweep-gamma", help="SSIM/PSNR against content for several gammas"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--gammas", type=_float_list)
    sp.add_argument("--pairs", type=int)

    sp = common(sub.add_parser("sweep-steps", help="sample one prompt at every checkpoint of a run"))
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--prompt", action="append")
    return p


_FLAG_MAP = {
    "seed": "seed", "n": "data.n", "size": "data.size", "steps": "train.total_steps",
    "snapshot_every": "train.snapshot_every", "lr": "train.learning_rate", "k": "style.k",
    "per_cluster": "style.per_cluster", "count": "style.count", "gamma": "style.gamma",
    "rank": "lora.rank", "alpha": "lora.alpha", "pairs": "eval.pairs",
}


def execute(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        for attr, dotted in _FLAG_MAP.items():
            cfg.override(dotted, getattr(args, attr, None))
        if args.command == "train-lora" and args.steps is not None:
            cfg.override("lora.total_steps", args.steps)
        if args.command == "sweep-gamma" and args.gammas is not None:
            cfg.override("eval.gammas", args.gammas)
        if args.out:
            cfg.override("out_dir", args.out)
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        produced = COMMANDS[args.command](args, cfg, out)
        _finish(out, cfg, args.command, [Path(p) for p in produced])
    except (GatewayError, NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SonarDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None):
    sys.exit(execute(argv))


if __name__ == "__main__":
    main()
