"""Dataset splitting, metrics, and the four experiments: baseline
training, progressive training, pack/morph degradation, and enhancement
recovery.  Reports are plain dicts with deterministic JSON serialization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .binformat import ORIGIN_BASE, Binary, corpus_digest, serialize
from .binviz import bytes_to_image, resize_to_input
from .errors import BadParent, ClassTooSmall, EmptyTestSet, ConfigError
from .nn import Model, predict, train
from .obfusc import build_enhanced_training_set, transform_corpus
from .seeding import derive_seed, rng_for

if TYPE_CHECKING:
    from .config import Config

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.20
    val_fraction_of_train: float = 0.15
    stratified: bool = True
    seed: int = 0

    def validate(self) -> None:
        for f in (self.test_fraction, self.val_fraction_of_train):
            if not (0.0 < f < 1.0):
                raise ConfigError(f"split fractions must be in (0,1), got {f}")


@dataclass
class Split:
    train: list[Binary]
    val: list[Binary]
    test: list[Binary]


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(corpus: list[Binary], spec: SplitSpec) -> Split:
    """Stratified, seeded partition.  Transformed samples always follow
    their base parent's partition (no leakage)."""
    spec.validate()
    base = [b for b in corpus if b.origin == ORIGIN_BASE]
    children: dict[str, list[Binary]] = {}
    base_ids = {b.id for b in base}
    for b in corpus:
        if b.origin != ORIGIN_BASE:
            if b.parent_id not in base_ids:
                raise BadParent(f"{b.id}: parent {b.parent_id!r} not in corpus")
            children.setdefault(b.parent_id, []).append(b)

    groups: dict[str, list[Binary]]
    if spec.stratified:
        groups = {}
        for b in base:
            groups.setdefault(b.family, []).append(b)
        for fam, members in groups.items():
            if len(members) < 3:
                raise ClassTooSmall(f"family {fam!r} has {len(members)} samples; "
                                    f"need >= 3 for a stratified split")
    else:
        groups = {"": base}

    parts: dict[str, list[Binary]] = {"train": [], "val": [], "test": []}
    for fam in sorted(groups):
        members = sorted(groups[fam], key=lambda b: b.id)
        rng = rng_for(spec.seed, "split", fam)
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        n_test = _half_up(len(shuffled) * spec.test_fraction)
        test, rest = shuffled[:n_test], shuffled[n_test:]
        n_val = _half_up(len(rest) * spec.val_fraction_of_train)
        val, tr = rest[:n_val], rest[n_val:]
        parts["test"].extend(test)
        parts["val"].extend(val)
        parts["train"].extend(tr)

    def with_children(bs: list[Binary]) -> list[Binary]:
        out = list(bs)
        for b in bs:
            out.extend(children.get(b.id, []))
        return out

    return Split(train=with_children(parts["train"]), val=with_children(parts["val"]),
                 test=with_children(parts["test"]))


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    accuracy: float
    macro_precision: float
    macro_f1: float
    per_class: dict[str, dict]
    confusion: list[list[int]]
    labels: list[str]
    n: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "macro_precision": self.macro_precision,
                "macro_f1": self.macro_f1, "per_class": self.per_class,
                "confusion": self.confusion, "labels": self.labels, "n": self.n}

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(**d)


def metrics_from_predictions(y_true: np.ndarray, y_pred: np.ndarray,
                             labels: list[str]) -> Metrics:
    """Confusion matrix (rows = true class), accuracy, and macro P/F1
    averaged over the classes present in the test set.  A class with zero
    predicted or true positives contributes precision/recall 0; F1 is 0
    when both P and R are 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if len(y_true) == 0:
        raise EmptyTestSet("no samples to evaluate")
    c = len(labels)
    conf = np.zeros((c, c), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    per_class = {}
    precisions, f1s = [], []
    for i, name in enumerate(labels):
        tp = int(conf[i, i])
        col = int(conf[:, i].sum())
        row = int(conf[i, :].sum())
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        f1 = 2 * p * r / (p + r) if (p + r) else 0.0
        per_class[name] = {"precision": p, "recall": r, "f1": f1, "support": row}
        if row > 0:  # macro averages cover classes present in the test set
            precisions.append(p)
            f1s.append(f1)
    return Metrics(accuracy=float(np.trace(conf) / conf.sum()),
                   macro_precision=float(np.mean(precisions)),
                   macro_f1=float(np.mean(f1s)),
                   per_class=per_class, confusion=conf.tolist(), labels=list(labels),
                   n=int(conf.sum()))


def corpus_to_arrays(binaries: list[Binary], side: int, labels: list[str],
                     normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Images for a sample list (sorted by id for determinism)."""
    ordered = sorted(binaries, key=lambda b: b.id)
    idx = {name: i for i, name in enumerate(labels)}
    xs = np.stack([resize_to_input(bytes_to_image(serialize(b)), side, normalize).values
                   for b in ordered])
    ys = np.array([idx[b.family] for b in ordered], dtype=np.int64)
    return xs, ys


def evaluate(model: Model, binaries: list[Binary], labels: list[str],
             side: int | None = None, normalize: bool = True) -> Metrics:
    if not binaries:
        raise EmptyTestSet("no samples to evaluate")
    side = side or model.input_side
    xs, ys = corpus_to_arrays(binaries, side, labels, normalize)
    preds, _ = predict(model, xs)
    return metrics_from_predictions(ys, preds, labels)


# ---------------------------------------------------------------------------
# experiment plumbing


def corpus_labels(corpus: list[Binary]) -> list[str]:
    return sorted({b.family for b in corpus})


def train_on(train_set: list[Binary], val_set: list[Binary], labels: list[str],
             cfg: "Config", tag: str) -> tuple[Model, list[dict]]:
    """Train a fresh model on a sample list; the seed substream is
    derived from (root seed, 'train', tag)."""
    seed = derive_seed(cfg.seed, "train", tag)
    norm = cfg.hyperparams.lambda_norm
    xs, ys = corpus_to_arrays(train_set, cfg.input_side, labels, norm)
    if val_set:
        xv, yv = corpus_to_arrays(val_set, cfg.input_side, labels, norm)
    else:
        xv = yv = None
    model = Model(n_classes=len(labels), hp=cfg.hyperparams, input_side=cfg.input_side,
                  seed=seed, class_labels=labels)
    history = train(model, xs, ys, xv, yv, epochs=cfg.epochs, seed=seed,
                    patience=cfg.patience)
    return model, history


def build_test_variants(test_set: list[Binary], cfg: "Config") -> tuple[dict, dict]:
    """Base/morphed/packed views of the test partition; transforms are
    derived only from test samples, and non-applicable ones are skipped
    with counts recorded."""
    morphed, rep_m = transform_corpus(test_set, "morph",
                                      seed=derive_seed(cfg.seed, "morphtest"),
                                      morph_passes=cfg.morph_passes)
    packed, rep_p = transform_corpus(test_set, "pack", packer_cmd=cfg.packer_cmd)
    variants = {"base": test_set, "morphed": morphed, "packed": packed}
    conversion = {"morph": rep_m.to_dict(), "pack": rep_p.to_dict()}
    return variants, conversion


def _grid_cell(model: Model, samples: list[Binary], labels: list[str],
               cfg: "Config", n_total: int) -> dict:
    if not samples:
        return {"skipped": "no applicable samples", "n_applicable": 0, "n_total": n_total}
    m = evaluate(model, samples, labels, cfg.input_side, cfg.hyperparams.lambda_norm)
    return {"metrics": m.to_dict(), "n_applicable": len(samples), "n_total": n_total}


def degradation_experiment(corpus: list[Binary], cfg: "Config"):
    """Train on the base training set; evaluate on base, morphed and
    packed test variants.  Returns (report dict, base model)."""
    labels = corpus_labels(corpus)
    sp = split(corpus, cfg.split_spec())
    model, history = train_on(sp.train, sp.val, labels, cfg, "base")
    variants, conversion = build_test_variants(sp.test, cfg)
    grid = {"base": {name: _grid_cell(model, samples, labels, cfg, len(sp.test))
                     for name, samples in variants.items()},
            "enhanced": {name: {"skipped": "enhancement not run"} for name in variants}}
    report = {"schema_version": REPORT_SCHEMA_VERSION, "labels": labels, "grid": grid,
              "conversion": conversion, "history": {"base": history}}
    return report, model


def enhancement_experiment(corpus: list[Binary], cfg: "Config"):
    """Both rows of the results grid: base-trained and enhanced-trained
    models evaluated on base/morphed/packed test variants.

    Returns (report dict, {"base": model, "enhanced": model})."""
    labels = corpus_labels(corpus)
    sp = split(corpus, cfg.split_spec())
    base_model, base_hist = train_on(sp.train, sp.val, labels, cfg, "base")

    enh_train, counts_tr = build_enhanced_training_set(
        sp.train, cfg.pack_fraction, cfg.morph_fraction,
        seed=derive_seed(cfg.seed, "augment", "train"), morph_passes=cfg.morph_passes)
    # the stopping metric should see obfuscated samples too, so the val
    # partition is enhanced the same way (its transforms stay in val)
    enh_val, counts_val = build_enhanced_training_set(
        sp.val, cfg.pack_fraction, cfg.morph_fraction,
        seed=derive_seed(cfg.seed, "augment", "val"), morph_passes=cfg.morph_passes)
    enh_model, enh_hist = train_on(enh_train, enh_val, labels, cfg, "enhanced")

    variants, conversion = build_test_variants(sp.test, cfg)
    grid = {"base": {name: _grid_cell(base_model, samples, labels, cfg, len(sp.test))
                     for name, samples in variants.items()},
            "enhanced": {name: _grid_cell(enh_model, samples, labels, cfg, len(sp.test))
                         for name, samples in variants.items()}}
    conversion["augment_train"] = counts_tr
    conversion["augment_val"] = counts_val
    report = {"schema_version": REPORT_SCHEMA_VERSION, "labels": labels, "grid": grid,
              "conversion": conversion,
              "history": {"base": base_hist, "enhanced": enh_hist}}
    return report, {"base": base_model, "enhanced": enh_model}


def progressive_training(corpus: list[Binary], cfg: "Config",
                         fractions: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0),
                         include_ids: bool = False):
    """Accuracy on the fixed test partition after training on nested
    stratified subsets of the training partition."""
    labels = corpus_labels(corpus)
    sp = split(corpus, cfg.split_spec())
    by_family: dict[str, list[Binary]] = {}
    for b in sp.train:
        by_family.setdefault(b.family, []).append(b)
    shuffled: dict[str, list[Binary]] = {}
    for fam in sorted(by_family):
        members = sorted(by_family[fam], key=lambda b: b.id)
        order = rng_for(cfg.seed, "progressive", fam).permutation(len(members))
        shuffled[fam] = [members[i] for i in order]

    curve = []
    for f in fractions:
        subset: list[Binary] = []
        for fam in sorted(shuffled):
            k = math.ceil(len(shuffled[fam]) * f)
            subset.extend(shuffled[fam][:k])
        model, _ = train_on(subset, sp.val, labels, cfg, "base")
        m = evaluate(model, sp.test, labels, cfg.input_side, cfg.hyperparams.lambda_norm)
        entry = {"fraction": f, "n_train": len(subset), "accuracy": m.accuracy}
        if include_ids:
            entry["train_ids"] = sorted(b.id for b in subset)
        curve.append(entry)
    return curve


def morph_pass_sensitivity(corpus: list[Binary], cfg: "Config",
                           passes: tuple[int, ...] = (1, 2, 3),
                           model: Model | None = None):
    """Metrics on the morphed test variant for several pass counts; the
    same pipeline as the degradation experiment's morphed cell."""
    labels = corpus_labels(corpus)
    sp = split(corpus, cfg.split_spec())
    if model is None:
        model, _ = train_on(sp.train, sp.val, labels, cfg, "base")
    out = {}
    for p in passes:
        morphed, rep = transform_corpus(sp.test, "morph",
                                        seed=derive_seed(cfg.seed, "morphtest"),
                                        morph_passes=p)
        cell = _grid_cell(model, morphed, labels, cfg, len(sp.test))
        out[str(p)] = cell
    return out


def run_full_experiment(corpus: list[Binary], cfg: "Config"):
    """The whole pipeline: 2x3 grid, progressive curve, morph-pass
    sensitivity; returns (report dict, models dict)."""
    report, models = enhancement_experiment(corpus, cfg)
    report["corpus_digest"] = corpus_digest(corpus)
    report["config"] = cfg.to_dict()
    report["seeds"] = {"root": cfg.seed,
                       "split": derive_seed(cfg.seed, "split"),
                       "train_base": derive_seed(cfg.seed, "train", "base"),
                       "train_enhanced": derive_seed(cfg.seed, "train", "enhanced"),
                       "morph_test": derive_seed(cfg.seed, "morphtest")}
    if cfg.run_progressive:
        report["progressive"] = progressive_training(corpus, cfg)
    if cfg.run_morph_sensitivity:
        report["morph_sensitivity"] = morph_pass_sensitivity(corpus, cfg,
                                                             model=models["base"])
    return report, models


def report_to_json(report: dict) -> str:
    """Deterministic serialization: sorted keys, no timestamps."""
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def metrics_grid_to_csv(grid: dict) -> str:
    """Flatten the (training variant x test variant) grid to CSV."""
    lines = ["training_set,test_set,accuracy,macro_precision,macro_f1,n_applicable,n_total"]
    for row in sorted(grid):
        for col in sorted(grid[row]):
            cell = grid[row][col]
            if "metrics" in cell:
                m = cell["metrics"]
                lines.append(f"{row},{col},{m['accuracy']:.6f},{m['macro_precision']:.6f},"
                             f"{m['macro_f1']:.6f},{cell['n_applicable']},{cell['n_total']}")
            else:
                lines.append(f"{row},{col},skipped,,,,{cell.get('n_total', '')}")
    return "\n".join(lines) + "\n"
