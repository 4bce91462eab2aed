import json
from pathlib import Path

import numpy as np
import pytest

from malvis import binformat as bf
from malvis import binviz
from malvis.cli import main
from malvis.config import SEED_ENV_VAR, load_config
from malvis.errors import ConfigError

TINY_CONFIG = {
    "seed": 5,
    "input_side": 32,
    "epochs": 1,
    "patience": None,
    "hyperparams": {"filters": [4, 8, 8], "dense1": 32, "dense2": 16},
    "shap_grid": 4,
    "shap_coalitions": 48,
    "occlusion_window": 8,
    "occlusion_stride": 8,
}

TINY_FAMILIES = [
    {"name": "reda", "count": 8, "size_min": 2048, "size_max": 3072,
     "motif_hex": "f0aa55", "motif_band": [32, 512],
     "texture": {"tile_hex": "2020383820", "stripe_levels": [0, 64],
                 "stripe_bytes": 256, "noise_fraction": 0.02},
     "overlay_min": 128, "overlay_max": 256},
    {"name": "blua", "count": 8, "size_min": 2048, "size_max": 3072,
     "motif_hex": "f1bb66", "motif_band": [32, 512],
     "texture": {"tile_hex": "c0c8d0d8e0e8", "stripe_levels": [0, -32],
                 "stripe_bytes": 384, "noise_fraction": 0.02},
     "overlay_min": 128, "overlay_max": 256},
    {"name": "grena", "count": 6, "size_min": 2048, "size_max": 3072,
     "motif_hex": "f2cc77", "motif_band": [32, 512], "has_code": False,
     "texture": {"tile_hex": "10f010f0f010", "stripe_levels": [0],
                 "stripe_bytes": 512, "noise_fraction": 0.02},
     "overlay_tail_texture": {"tile_hex": "d0d8", "noise_fraction": 0.2},
     "overlay_tail_fraction": 0.4,
     "overlay_min": 128, "overlay_max": 256},
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    spec = root / "families.json"
    spec.write_text(json.dumps(TINY_FAMILIES))
    cfgfile = root / "config.json"
    cfgfile.write_text(json.dumps(TINY_CONFIG))
    corpus_dir = root / "corpus"
    rc = main(["gen-corpus", "--spec", str(spec), "--out", str(corpus_dir), "--seed", "5"])
    assert rc == 0
    manifest = corpus_dir / "manifest.jsonl"
    assert manifest.is_file()
    ckpt = root / "model.ckpt"
    rc = main(["train", str(manifest), "--config", str(cfgfile), "--out", str(ckpt)])
    assert rc == 0
    return {"root": root, "spec": spec, "config": cfgfile, "manifest": manifest,
            "ckpt": ckpt}


def test_gen_corpus_loadable(workspace):
    corpus = bf.load_corpus(workspace["manifest"])
    assert len(corpus) == 22
    assert {b.family for b in corpus} == {"reda", "blua", "grena"}


def test_gen_corpus_builtin_default(tmp_path):
    out = tmp_path / "c"
    rc = main(["gen-corpus", "--out", str(out), "--seed", "3", "--scale", "0.02"])
    assert rc == 0
    corpus = bf.load_corpus(out / "manifest.jsonl")
    assert {b.family for b in corpus} == {"alfa", "bravo", "charlie", "delta", "echo"}


def test_convert_writes_pgms(workspace, tmp_path):
    out = tmp_path / "imgs"
    rc = main(["convert", str(workspace["manifest"]), "--out", str(out)])
    assert rc == 0
    pgms = sorted(out.glob("*.pgm"))
    assert len(pgms) == 22
    px = binviz.read_pgm(pgms[0])
    assert px.ndim == 2 and px.shape[1] in (32, 64)


def test_train_artifacts(workspace):
    assert workspace["ckpt"].is_file()
    hist = Path(str(workspace["ckpt"]) + ".history.csv").read_text().strip().split("\n")
    assert hist[0] == "epoch,loss,val_accuracy"
    assert len(hist) == 2  # one epoch


def test_eval_writes_metrics(workspace, tmp_path):
    out = tmp_path / "metrics.json"
    rc = main(["eval", str(workspace["ckpt"]), str(workspace["manifest"]),
               "--out", str(out)])
    assert rc == 0
    m = json.loads(out.read_text())
    assert set(m) >= {"accuracy", "macro_precision", "macro_f1", "confusion"}
    assert m["n"] == 22


def test_obfuscate_pack(workspace, tmp_path):
    out = tmp_path / "packed"
    rc = main(["obfuscate", str(workspace["manifest"]), "--mode", "pack",
               "--config", str(workspace["config"]), "--out", str(out)])
    assert rc == 0
    rep = json.loads((out / "conversion_report.json").read_text())
    assert rep["overall"]["converted"] > 0
    corpus = bf.load_corpus(out / "manifest.jsonl")
    packed = [b for b in corpus if b.origin == "packed"]
    assert len(packed) == rep["overall"]["converted"]
    parents = {b.id for b in corpus if b.origin == "base"}
    assert all(b.parent_id in parents for b in packed)


def test_obfuscate_morph_skips_no_code_family(workspace, tmp_path):
    out = tmp_path / "morphed"
    rc = main(["obfuscate", str(workspace["manifest"]), "--mode", "morph",
               "--config", str(workspace["config"]), "--out", str(out)])
    assert rc == 0
    rep = json.loads((out / "conversion_report.json").read_text())
    assert "grena" in rep["empty_classes"]


def test_augment(workspace, tmp_path):
    out = tmp_path / "aug"
    rc = main(["augment", str(workspace["manifest"]), "--pack-fraction", "1.0",
               "--morph-fraction", "0.5", "--config", str(workspace["config"]),
               "--out", str(out)])
    assert rc == 0
    enhanced = bf.load_corpus(out / "manifest.jsonl")
    assert len(enhanced) > 22
    counts = json.loads((out / "augment_counts.json").read_text())
    assert counts["pack_applied"] + counts["pack_skipped"] == counts["pack_selected"]


def test_explain_single_sample(workspace, tmp_path):
    corpus = bf.load_corpus(workspace["manifest"])
    sid = corpus[0].id
    out = tmp_path / "exp"
    rc = main(["explain", str(workspace["ckpt"]), "--manifest", str(workspace["manifest"]),
               "--sample", sid, "--method", "occlusion",
               "--config", str(workspace["config"]), "--out", str(out)])
    assert rc == 0
    assert (out / f"{sid}.occlusion.pgm").is_file()
    sidecar = json.loads((out / f"{sid}.occlusion.pgm.json").read_text())
    assert sidecar["method"] == "occlusion"
    assert "min" in sidecar and "max" in sidecar


def test_explain_family_all_methods(workspace, tmp_path):
    out = tmp_path / "expfam"
    rc = main(["explain", str(workspace["ckpt"]), "--manifest", str(workspace["manifest"]),
               "--family", "reda", "--method", "all",
               "--config", str(workspace["config"]), "--out", str(out)])
    assert rc == 0
    for method in ("occlusion", "hirescam", "shap"):
        assert (out / f"reda.{method}.cumulative.pgm").is_file()
    scores = json.loads((out / "agreement.json").read_text())
    assert len(scores) == 3  # three method pairs
    for s in scores:
        assert 0.0 <= s["iou_topk"] <= 1.0
        assert -1.0 <= s["rank_corr"] <= 1.0


def test_explain_unknown_sample_is_validation_error(workspace, tmp_path):
    rc = main(["explain", str(workspace["ckpt"]), "--manifest", str(workspace["manifest"]),
               "--sample", "nope", "--out", str(tmp_path / "x")])
    assert rc == 1


def test_experiment_deterministic_reruns(workspace, tmp_path):
    cfg = dict(TINY_CONFIG)
    cfg["corpus_manifest"] = str(workspace["manifest"])
    cfg["run_progressive"] = False
    cfg["run_morph_sensitivity"] = True
    cfgfile = tmp_path / "expcfg.json"
    cfgfile.write_text(json.dumps(cfg))
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        rc = main(["experiment", "--config", str(cfgfile), "--out", str(out)])
        assert rc == 0
        outs.append(out)
    r1 = (outs[0] / "report.json").read_bytes()
    r2 = (outs[1] / "report.json").read_bytes()
    assert r1 == r2
    for ck in ("base.ckpt", "enhanced.ckpt"):
        assert (outs[0] / ck).read_bytes() == (outs[1] / ck).read_bytes()
    report = json.loads(r1)
    assert set(report["grid"]["enhanced"]) == {"base", "morphed", "packed"}
    assert (outs[0] / "grid.csv").read_text().startswith("training_set,")


def test_missing_manifest_is_validation_error(tmp_path):
    rc = main(["convert", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o")])
    assert rc == 1


def test_unknown_config_key_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 1, "not_a_key": 2}))
    with pytest.raises(ConfigError):
        load_config(bad)
    rc = main(["experiment", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 1


def test_env_seed_override(tmp_path, monkeypatch):
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(json.dumps({"seed": 5}))
    monkeypatch.setenv(SEED_ENV_VAR, "99")
    assert load_config(cfgfile).seed == 99
    monkeypatch.setenv(SEED_ENV_VAR, "notanint")
    with pytest.raises(ConfigError):
        load_config(cfgfile)


def test_bad_family_spec_key(tmp_path):
    spec = tmp_path / "fam.json"
    spec.write_text(json.dumps([{"name": "x", "bogus": 1}]))
    rc = main(["gen-corpus", "--spec", str(spec), "--out", str(tmp_path / "o")])
    assert rc == 1
