"""Acceptance suite: one test per shipped claim, each printing a pass/fail
line with the measured numbers.

The full run trains several models on the built-in corpus; expect roughly
20 minutes on one CPU core.  Run it visibly with:

    pytest tests/test_acceptance.py -v -s
"""

import json
import time

import numpy as np
import pytest

from malvis import binformat as bf
from malvis import harness, nn, obfusc, xai
from malvis.binviz import bytes_to_image, resize_to_input
from malvis.cli import main as cli_main
from malvis.config import Config
from malvis.seeding import derive_seed

ROOT_SEED = 20250808


def banner(num: int, name: str, ok: bool, detail: str) -> bool:
    print(f"\n[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


# ---------------------------------------------------------------------------
# shared expensive fixtures


@pytest.fixture(scope="session")
def cfg():
    return Config(seed=ROOT_SEED)


@pytest.fixture(scope="session")
def corpus(cfg):
    return bf.make_default_corpus(cfg.seed)


@pytest.fixture(scope="session")
def labels(corpus):
    return harness.corpus_labels(corpus)


@pytest.fixture(scope="session")
def splits(corpus, cfg):
    return harness.split(corpus, cfg.split_spec())


@pytest.fixture(scope="session")
def base_training(splits, labels, cfg):
    t0 = time.monotonic()
    model, history = harness.train_on(splits.train, splits.val, labels, cfg, "base")
    return model, history, time.monotonic() - t0


@pytest.fixture(scope="session")
def enhanced_model(splits, labels, cfg):
    enh_train, _ = obfusc.build_enhanced_training_set(
        splits.train, cfg.pack_fraction, cfg.morph_fraction,
        seed=derive_seed(cfg.seed, "augment", "train"), morph_passes=cfg.morph_passes)
    enh_val, _ = obfusc.build_enhanced_training_set(
        splits.val, cfg.pack_fraction, cfg.morph_fraction,
        seed=derive_seed(cfg.seed, "augment", "val"), morph_passes=cfg.morph_passes)
    model, _ = harness.train_on(enh_train, enh_val, labels, cfg, "enhanced")
    return model


@pytest.fixture(scope="session")
def test_variants(splits, cfg):
    variants, conversion = harness.build_test_variants(splits.test, cfg)
    return variants


def _accuracy(model, samples, labels, cfg):
    return harness.evaluate(model, samples, labels, cfg.input_side).accuracy


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_criterion_01_gradient_correctness():
    hp = nn.Hyperparams(filters=(4, 8, 8), dense1=32, dense2=16,
                        dropout_conv=0.0, dropout_dense=0.0)
    model = nn.Model(n_classes=3, hp=hp, input_side=16, seed=7, dtype=np.float64)
    rng = np.random.default_rng(2)
    x = rng.random((2, 16, 16))
    y = np.array([0, 2])
    t0 = time.monotonic()
    _, trace = model.forward(x, mode="train", want_trace=True)
    _, grads, _ = nn.backward(model, trace, y)

    def loss_of():
        _, tr = model.forward(x, mode="train", want_trace=True)
        return nn.softmax_xent(tr.logits, y)[0]

    eps = 1e-4
    worst = 0.0
    n_checked = 0
    for name, g in grads.items():
        flat_w = model.params[name].ravel()
        flat_g = g.ravel()
        for i in range(flat_w.size):
            old = flat_w[i]
            flat_w[i] = old + eps
            lp = loss_of()
            flat_w[i] = old - eps
            lm = loss_of()
            flat_w[i] = old
            fd = (lp - lm) / (2 * eps)
            rel = abs(fd - flat_g[i]) / (abs(flat_g[i]) + 1e-8)
            worst = max(worst, rel)
            n_checked += 1
    elapsed = time.monotonic() - t0
    ok = worst <= 1e-3 and elapsed < 60
    assert banner(1, "gradient correctness", ok,
                  f"all {n_checked} params elementwise, worst rel err {worst:.2e}, "
                  f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. clean accuracy floor


def test_criterion_02_clean_accuracy_floor(base_training, splits, labels, cfg):
    model, history, train_seconds = base_training
    acc = _accuracy(model, splits.test, labels, cfg)
    ok = acc >= 0.95 and len(history) <= 20 and train_seconds < 600
    assert banner(2, "clean accuracy floor", ok,
                  f"test acc {acc:.3f} after {len(history)} epochs in {train_seconds:.0f}s")


# ---------------------------------------------------------------------------
# 3. packing degradation direction


def test_criterion_03_packing_degradation(base_training, splits, labels, cfg,
                                          test_variants):
    model = base_training[0]
    clean = _accuracy(model, test_variants["base"], labels, cfg)
    packed = _accuracy(model, test_variants["packed"], labels, cfg)
    ok = packed <= clean - 0.30
    assert banner(3, "packing degradation", ok,
                  f"clean {clean:.3f} -> packed {packed:.3f} "
                  f"(drop {100 * (clean - packed):.1f} pts, need >= 30)")


# ---------------------------------------------------------------------------
# 4. morph robustness direction


def test_criterion_04_morph_robustness(base_training, corpus, splits, labels, cfg,
                                       test_variants):
    model = base_training[0]
    clean = _accuracy(model, test_variants["base"], labels, cfg)
    morphed = _accuracy(model, test_variants["morphed"], labels, cfg)
    sens = harness.morph_pass_sensitivity(corpus, cfg, passes=(1, 2, 3), model=model)
    per_pass = [sens[str(p)]["metrics"]["accuracy"] for p in (1, 2, 3)]
    spread = max(per_pass) - min(per_pass)
    ok = (clean - morphed) <= 0.05 and spread <= 0.02
    assert banner(4, "morph robustness", ok,
                  f"clean {clean:.3f} -> morphed {morphed:.3f}; "
                  f"pass accs {[f'{a:.3f}' for a in per_pass]}, spread "
                  f"{100 * spread:.1f} pts")


# ---------------------------------------------------------------------------
# 5. enhancement recovery


def test_criterion_05_enhancement_recovery(base_training, enhanced_model, labels, cfg,
                                           test_variants):
    base = base_training[0]
    base_packed = _accuracy(base, test_variants["packed"], labels, cfg)
    enh_packed = _accuracy(enhanced_model, test_variants["packed"], labels, cfg)
    base_clean = _accuracy(base, test_variants["base"], labels, cfg)
    enh_clean = _accuracy(enhanced_model, test_variants["base"], labels, cfg)
    ok = (enh_packed - base_packed) >= 0.15 and abs(enh_clean - base_clean) <= 0.02
    assert banner(5, "enhancement recovery", ok,
                  f"packed {base_packed:.3f} -> {enh_packed:.3f} "
                  f"(+{100 * (enh_packed - base_packed):.1f} pts, need >= 15); "
                  f"clean {base_clean:.3f} -> {enh_clean:.3f}")


# ---------------------------------------------------------------------------
# 6. progressive training shape


def test_criterion_06_progressive_training(corpus, cfg):
    curve = harness.progressive_training(corpus, cfg)
    accs = [e["accuracy"] for e in curve]
    non_decreasing = all(accs[i + 1] >= accs[i] - 0.02 for i in range(len(accs) - 1))
    plateau = (accs[-1] - accs[-2]) <= 0.02
    ok = non_decreasing and plateau
    assert banner(6, "progressive training shape", ok,
                  f"accs {[f'{a:.3f}' for a in accs]}, 0.8->1.0 gain "
                  f"{100 * (accs[-1] - accs[-2]):.1f} pts")


# ---------------------------------------------------------------------------
# 7. SHAP exactness


def test_criterion_07_shap_exactness():
    side = 64
    seg_map = (np.arange(side)[:, None] // 32) * 4 + (np.arange(side)[None, :] // 16)
    seg = xai.Segmentation(seg_map=seg_map.astype(np.int64), n_segments=8)
    rng = np.random.default_rng(51)
    w = rng.normal(size=8)
    masks = [(seg.seg_map == i) for i in range(8)]

    def stub(batch):
        means = np.stack([batch[:, m].mean(axis=1) for m in masks], axis=1)
        p = 0.5 + 0.4 * np.tanh(means @ w + 0.25 * means[:, 1] * means[:, 6])
        return np.stack([p, 1 - p], axis=1)

    x = np.random.default_rng(52).random((side, side)).astype(np.float32)

    def value_fn(z):
        batch = xai._masked_batch(x, seg, np.asarray(z)[None], 0.0)
        return float(stub(batch)[0, 0])

    oracle = xai.exact_shap_oracle(value_fn, 8)
    full = np.array(xai.kernel_shap(stub, x, seg, n_coalitions="all",
                                    target_class=0).meta["phi"])
    sampled = np.array(xai.kernel_shap(stub, x, seg, n_coalitions=2048, seed=3,
                                       target_class=0).meta["phi"])
    exact_err = np.abs(full - oracle).max()
    sampled_err = np.abs(sampled - oracle).max()
    ok = exact_err <= 1e-6 and sampled_err <= 0.02
    assert banner(7, "kernel SHAP exactness", ok,
                  f"full-enumeration err {exact_err:.2e} (<=1e-6), "
                  f"2048-coalition err {sampled_err:.4f} (<=0.02)")


# ---------------------------------------------------------------------------
# 8. occlusion localization


def test_criterion_08_occlusion_localization():
    # family whose label is determined by a 2 KiB band: bytes 2048..4096 of
    # an 8 KiB file, i.e. rows 16..31 of the 64x64 input (cell row 1 of a
    # 4x4 grid of 16px cells)
    spec = bf.FamilySpec(
        name="stubfam", size_min=8192, size_max=8192,
        motif=bytes((0xF0, 0xE8)) * 1024, motif_band=(2048, 4096),
        texture=bf.TextureSpec(tile=b"\x00", noise_fraction=1.0),
        has_code=False)
    samples = bf.generate_family(spec, 20, seed=88)

    def stub(batch):
        region_mean = batch[:, 16:32, :].mean(axis=(1, 2))
        p = np.clip(region_mean, 0.01, 0.99)
        return np.stack([p, 1 - p], axis=1)

    motif_cells = {(1, j) for j in range(4)}
    ious = []
    for b in samples:
        tensor = resize_to_input(bytes_to_image(bf.serialize(b)), 64).values
        h = xai.occlusion_map(stub, tensor, window=16, stride=16, baseline=0.0,
                              target_class=0)
        cell_scores = h.raw.reshape(4, 16, 4, 16).mean(axis=(1, 3))
        order = np.argsort(-cell_scores.ravel(), kind="stable")[:4]
        top = {(int(i) // 4, int(i) % 4) for i in order}
        ious.append(len(top & motif_cells) / len(top | motif_cells))
    mean_iou = float(np.mean(ious))
    ok = mean_iou >= 0.5
    assert banner(8, "occlusion localization", ok,
                  f"mean IoU of top-4 cells vs motif region {mean_iou:.3f} "
                  f"over {len(samples)} samples (>=0.5)")


# ---------------------------------------------------------------------------
# 9. overlay focus shift after packing


def _mass_fractions(raw: np.ndarray):
    """Top/bottom-quarter shares of the positive class-evidence mass."""
    pos = np.maximum(raw, 0.0)
    total = pos.sum()
    if total <= 0:
        return None
    q = pos.shape[0] // 4
    return pos[:q].sum() / total, pos[-q:].sum() / total


def test_criterion_09_overlay_shift(enhanced_model, splits, labels, cfg, test_variants):
    parents = {b.id: b for b in splits.test}
    tops_base, bots_base, tops_packed, bots_packed = [], [], [], []
    for packed in test_variants["packed"]:
        base = parents[packed.parent_id]
        ci = labels.index(base.family)
        tb = resize_to_input(bytes_to_image(bf.serialize(base)), cfg.input_side).values
        tp = resize_to_input(bytes_to_image(bf.serialize(packed)), cfg.input_side).values
        mb = _mass_fractions(xai.hirescam(enhanced_model, tb, ci).raw)
        mp = _mass_fractions(xai.hirescam(enhanced_model, tp, ci).raw)
        if mb is None or mp is None:
            continue
        tops_base.append(mb[0])
        bots_base.append(mb[1])
        tops_packed.append(mp[0])
        bots_packed.append(mp[1])
    top_shift = np.mean(tops_packed) - np.mean(tops_base)
    bot_shift = np.mean(bots_packed) - np.mean(bots_base)
    ok = bot_shift > 0 and top_shift < 0
    assert banner(9, "overlay focus shift", ok,
                  f"bottom-quarter mass {np.mean(bots_base):.3f} -> "
                  f"{np.mean(bots_packed):.3f} (shift {bot_shift:+.3f}); "
                  f"top-quarter {np.mean(tops_base):.3f} -> {np.mean(tops_packed):.3f} "
                  f"(shift {top_shift:+.3f}); n={len(tops_base)}")


# ---------------------------------------------------------------------------
# 10. experiment determinism


def test_criterion_10_experiment_determinism(tmp_path):
    corpus_dir = tmp_path / "corpus"
    rc = cli_main(["gen-corpus", "--out", str(corpus_dir), "--seed", "7",
                   "--scale", "0.06"])
    assert rc == 0
    cfg = {"seed": 7, "input_side": 32, "epochs": 2, "patience": None,
           "hyperparams": {"filters": [4, 8, 8], "dense1": 32, "dense2": 16},
           "shap_coalitions": 48, "shap_grid": 4,
           "corpus_manifest": str(corpus_dir / "manifest.jsonl")}
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    digests = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        rc = cli_main(["experiment", "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0
        digests.append({
            "report": (out / "report.json").read_bytes(),
            "base": nn.checkpoint_digest(out / "base.ckpt"),
            "enhanced": nn.checkpoint_digest(out / "enhanced.ckpt"),
        })
    ok = digests[0] == digests[1]
    assert banner(10, "experiment determinism", ok,
                  f"report bytes {'identical' if digests[0]['report'] == digests[1]['report'] else 'DIFFER'}, "
                  f"checkpoint digests {'identical' if digests[0]['base'] == digests[1]['base'] else 'DIFFER'}")


# ---------------------------------------------------------------------------
# 11. round-trip property suite


def test_criterion_11_round_trips(tmp_path):
    rng = np.random.default_rng(4242)
    n = 500
    container_ok = pack_ok = pack_attempted = 0
    for i in range(n):
        n_sections = int(rng.integers(1, 4))
        sections = []
        for j in range(n_sections):
            kind = int(rng.choice(bf.SECTION_KINDS))
            if rng.random() < 0.7:
                tile = rng.integers(0, 256, int(rng.integers(2, 16)),
                                    dtype=np.uint8).tobytes()
                data = tile * int(rng.integers(16, 256))
            else:
                data = rng.integers(0, 256, int(rng.integers(0, 2048)),
                                    dtype=np.uint8).tobytes()
            sections.append(bf.Section(kind, data))
        overlay = rng.integers(0, 256, int(rng.integers(0, 256)),
                               dtype=np.uint8).tobytes()
        b = bf.make_binary(id=f"rt{i}", family="rt", sections=sections, overlay=overlay)
        raw = bf.serialize(b)
        again = bf.parse(raw, id=b.id, family=b.family)
        if bf.serialize(again) == raw and again.header.flags == b.header.flags \
                and [s.kind for s in again.sections] == [s.kind for s in b.sections]:
            container_ok += 1
        res = obfusc.pack(b)
        pack_attempted += 1
        if res.applicable:
            if bf.serialize(obfusc.unpack(res.binary)) == raw:
                pack_ok += 1
        else:
            pack_ok += 1  # not-applicable is a legal outcome, not a failure

    hp = nn.Hyperparams(filters=(2, 2, 2), dense1=4, dense2=4)
    ckpt_ok = 0
    path_a, path_b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    for i in range(n):
        model = nn.Model(n_classes=2, hp=hp, input_side=16, seed=i, dtype=np.float32)
        nn.save_checkpoint(model, path_a)
        nn.save_checkpoint(nn.load_checkpoint(path_a), path_b)
        if path_a.read_bytes() == path_b.read_bytes():
            ckpt_ok += 1
    ok = container_ok == n and pack_ok == n and ckpt_ok == n
    assert banner(11, "round trips", ok,
                  f"containers {container_ok}/{n}, pack/unpack {pack_ok}/{n}, "
                  f"checkpoints {ckpt_ok}/{n}")
