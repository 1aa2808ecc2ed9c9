import csv
import json
from pathlib import Path

import pytest
import yaml

from sonardiff.cli import DEFAULTS, RunConfig, execute
from sonardiff.datasets import load_manifest
from sonardiff.errors import ValidationError

TINY = {
    "seed": 3,
    "denoiser": {"widths": [8, 16, 32], "d_cond": 16, "time_dim": 16, "groups": 4},
    "sampler": {"num_steps": 5},
    "train": {"total_steps": 4, "snapshot_every": 2, "batch_size": 4},
    "lora": {"total_steps": 3, "batch_size": 4, "rank": 2},
    "style": {"k": 2, "count": 3},
    "data": {"n": 24},
    "eval": {"per_class": 2, "classifier_epochs": 2, "pairs": 3},
}


def tree_bytes(root: Path) -> dict:
    """Every file under ``root``; the resolved config drops ``out_dir``, which names ``root`` itself."""
    out = {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    if "run_config.json" in out:
        resolved = json.loads(out["run_config.json"])
        resolved.pop("out_dir")
        out["run_config.json"] = json.dumps(resolved, sort_keys=True).encode()
    return out


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    data, run = root / "data", root / "run"
    assert execute(["make-toy-data", "--config", str(cfg), "--out", str(data)]) == 0
    assert execute(["train-ddpm", "--config", str(cfg), "--manifest", str(data / "manifest.json"),
                    "--out", str(run)]) == 0
    return {"root": root, "cfg": str(cfg), "data": data, "run": run, "ckpt": str(run / "model.npz")}


def test_unknown_subcommand_exits_2(capsys):
    assert execute(["levitate"]) == 2
    assert "invalid choice" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path, capsys):
    code = execute(["make-toy-data", "--config", str(tmp_path / "absent.yaml"), "--out", str(tmp_path)])
    assert code == 2 and "--config" in capsys.readouterr().err


def test_unknown_config_key_names_field(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(yaml.safe_dump({"train": {"total_step": 5}}))
    assert execute(["make-toy-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "train.total_step" in capsys.readouterr().err


def test_run_config_rejects_unknown_sections():
    with pytest.raises(ValidationError):
        RunConfig.from_mapping({"optimizer": {}})
    assert RunConfig.from_mapping(None).to_dict() == DEFAULTS


def test_invalid_value_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"batch_size": 0}, "data": {"n": 4}}))
    execute(["make-toy-data", "--config", str(cfg), "--out", str(tmp_path / "d")])
    code = execute(["train-ddpm", "--config", str(cfg), "--manifest", str(tmp_path / "d" / "manifest.json"),
                    "--out", str(tmp_path / "r")])
    assert code == 2 and "train" in capsys.readouterr().err


def test_make_toy_data_rerun_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert execute(["make-toy-data", "--n", "12", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b
    assert sum(k.endswith(".png") for k in a) == 12


def test_every_run_lists_its_files(tiny):
    listing = json.loads((tiny["run"] / "produced_files.json").read_text())
    names = {f["path"] for f in listing["files"]}
    assert "model.npz" in names and "train_log.jsonl" in names
    resolved = json.loads((tiny["run"] / "run_config.json").read_text())
    assert resolved["command"] == "train-ddpm" and resolved["train"]["total_steps"] == 4


def test_train_writes_snapshots(tiny):
    assert sorted(p.name for p in tiny["run"].glob("ckpt_*.npz")) == [
        "ckpt_000000.npz", "ckpt_000002.npz", "ckpt_000004.npz"]


def test_stylize_single_writes_sidecar(tiny, tmp_path):
    images = sorted((tiny["data"] / "images").glob("*.png"))
    out = tmp_path / "sty"
    code = execute(["stylize", "--config", tiny["cfg"], "--checkpoint", tiny["ckpt"], "--content", str(images[0]),
                    "--style", str(images[1]), "--gamma", "0.5", "--out", str(out)])
    assert code == 0
    side = json.loads((out / "stylized.json").read_text())
    assert side["gamma"] == 0.5 and -1 <= side["ssim_vs_content"] <= 1
    assert (out / "stylized.png").is_file()


def test_stylize_gamma_out_of_range_exits_2(tiny, tmp_path, capsys):
    images = sorted((tiny["data"] / "images").glob("*.png"))
    code = execute(["stylize", "--config", tiny["cfg"], "--checkpoint", tiny["ckpt"], "--content", str(images[0]),
                    "--style", str(images[1]), "--gamma", "1.5", "--out", str(tmp_path)])
    assert code == 2 and "gamma" in capsys.readouterr().err


def test_sweep_gamma_has_four_rows(tiny, tmp_path):
    out = tmp_path / "sweep"
    code = execute(["sweep-gamma", "--config", tiny["cfg"], "--checkpoint", tiny["ckpt"], "--manifest",
                    str(tiny["data"] / "manifest.json"), "--gammas", "0.3,0.5,0.75,0.9", "--out", str(out)])
    assert code == 0
    rows = list(csv.reader(open(out / "sweep_gamma.csv")))
    assert rows[0] == ["gamma", "SSIM", "PSNR"]
    assert [r[0] for r in rows[1:]] == ["0.3", "0.5", "0.75", "0.9"]


def test_finetune_refuses_manifest_without_pairs(tiny, tmp_path, capsys):
    code = execute(["finetune", "--config", tiny["cfg"], "--checkpoint", tiny["ckpt"], "--manifest",
                    str(tiny["data"] / "manifest.json"), "--out", str(tmp_path)])
    assert code == 2 and "caption pairs" in capsys.readouterr().err


def test_finetune_requires_checkpoint(tiny, tmp_path):
    assert execute(["finetune", "--config", tiny["cfg"], "--manifest", str(tiny["data"] / "manifest.json"),
                    "--out", str(tmp_path)]) == 2


def test_gateway_flag_beats_environment(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv("GATEWAY_MODE", "http")
    monkeypatch.delenv("GATEWAY_URL", raising=False)
    manifest = str(tiny["data"] / "manifest.json")
    assert execute(["caption", "--manifest", manifest, "--out", str(tmp_path / "a")]) == 2
    assert execute(["caption", "--manifest", manifest, "--gateway-mode", "stub", "--out", str(tmp_path / "b")]) == 0
    captioned = load_manifest(tmp_path / "b" / "manifest.json")
    assert all(e.caption_low and e.caption_high for e in captioned.entries)


def test_lora_generate_and_sweep_steps(tiny, tmp_path):
    cfg, manifest = tiny["cfg"], str(tiny["data"] / "manifest.json")
    lora_out, gen_out = tmp_path / "lora", tmp_path / "gen"
    assert execute(["train-lora", "--config", cfg, "--checkpoint", tiny["ckpt"], "--manifest", manifest,
                    "--out", str(lora_out)]) == 0
    assert (lora_out / "adapters.npz").is_file() and (lora_out / "merged.npz").is_file()
    assert execute(["generate", "--config", cfg, "--checkpoint", tiny["ckpt"], "--adapters",
                    str(lora_out / "adapters.npz"), "--per-class", "2", "--out", str(gen_out)]) == 0
    gen = load_manifest(gen_out / "manifest.json")
    assert len(gen) == 6 and {e.source for e in gen.entries} == {"generated"}
    assert {e.label for e in gen.entries} == {"ship", "plane", "mine"}

    assert execute(["sweep-steps", "--config", cfg, "--run-dir", str(tiny["run"]), "--out",
                    str(tmp_path / "steps")]) == 0
    assert (tmp_path / "steps" / "steps_grid.png").is_file()


def test_classify_emits_three_columns(tiny, tmp_path):
    data2 = tmp_path / "test_data"
    assert execute(["make-toy-data", "--n", "12", "--seed", "99", "--out", str(data2)]) == 0
    out = tmp_path / "cls"
    assert execute(["classify", "--config", tiny["cfg"], "--train-manifest", str(tiny["data"] / "manifest.json"),
                    "--test-manifest", str(data2 / "manifest.json"), "--out", str(out)]) == 0
    head = next(csv.reader(open(out / "classification.csv")))
    assert head == ["classifier", "real accuracy", "synthetic accuracy", "real+synthetic accuracy"]


def test_identical_reruns_reproduce_artifacts(tiny, tmp_path):
    cfg, manifest = tiny["cfg"], str(tiny["data"] / "manifest.json")
    for name in ("a", "b"):
        assert execute(["train-ddpm", "--config", cfg, "--manifest", manifest, "--out", str(tmp_path / name)]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    skip = {"train_log.jsonl", "produced_files.json"}  # the log carries wall-clock step timings
    assert {k: v for k, v in a.items() if k not in skip} == {k: v for k, v in b.items() if k not in skip}
