"""Command-line surface wiring corpus generation, conversion, training,
obfuscation, explanation and the full experiment pipeline.

Every command is deterministic given its inputs and seeds, writes only
under --out, and embeds a config echo in its JSON artifacts.  Exit codes:
0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import binformat, binviz, harness, nn, obfusc, xai
from .config import Config, load_config
from .errors import MalvisError, ValidationError, ConfigError
from .seeding import derive_seed


def _load_family_specs(path: str) -> list[tuple[binformat.FamilySpec, int]]:
    """Family spec file: JSON list of objects (see README for the schema)."""
    try:
        items = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read family specs: {exc}") from exc
    out = []
    for d in items:
        known = {"name", "count", "size_min", "size_max", "motif_hex", "motif_band",
                 "packable", "has_code", "overlay_min", "overlay_max",
                 "prologue_level", "prologue_len", "texture", "overlay_texture",
                 "overlay_tail_texture", "overlay_tail_fraction", "use_code_patterns"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{path}: unknown family spec keys {sorted(unknown)}")

        def tex(td) -> binformat.TextureSpec | None:
            if td is None:
                return None
            return binformat.TextureSpec(
                tile=bytes.fromhex(td["tile_hex"]),
                stripe_levels=tuple(td.get("stripe_levels", [0])),
                stripe_bytes=int(td.get("stripe_bytes", 1024)),
                noise_fraction=float(td.get("noise_fraction", 0.03)))

        patterns = tuple(p for p, _ in binformat.CODE_SWAP_PAIRS) \
            if d.get("use_code_patterns", True) else ()
        spec = binformat.FamilySpec(
            name=d["name"], size_min=int(d["size_min"]), size_max=int(d["size_max"]),
            motif=bytes.fromhex(d["motif_hex"]), motif_band=tuple(d["motif_band"]),
            texture=tex(d.get("texture")) or binformat.TextureSpec(tile=b"\x80"),
            overlay_texture=tex(d.get("overlay_texture")),
            overlay_tail_texture=tex(d.get("overlay_tail_texture")),
            overlay_tail_fraction=float(d.get("overlay_tail_fraction", 0.5)),
            packable=bool(d.get("packable", True)), has_code=bool(d.get("has_code", True)),
            overlay_min=int(d.get("overlay_min", 0)), overlay_max=int(d.get("overlay_max", 0)),
            prologue_level=d.get("prologue_level"), prologue_len=int(d.get("prologue_len", 0)),
            code_patterns=patterns)
        out.append((spec, int(d.get("count", 10))))
    return out


def _corpus_for(cfg: Config) -> list[binformat.Binary]:
    if cfg.corpus_manifest:
        return binformat.load_corpus(cfg.corpus_manifest)
    return binformat.make_default_corpus(cfg.seed, scale=cfg.corpus_scale)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(args) -> int:
    if args.spec:
        binaries = []
        for spec, count in _load_family_specs(args.spec):
            n = max(1, int(round(count * args.scale)))
            binaries.extend(binformat.generate_family(spec, n, args.seed))
    else:
        binaries = binformat.make_default_corpus(args.seed, scale=args.scale)
    binformat.save_corpus(binaries, args.out)
    print(str(Path(args.out) / "manifest.jsonl"))
    return 0


def cmd_convert(args) -> int:
    corpus = binformat.load_corpus(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for b in corpus:
        img = binviz.bytes_to_image(binformat.serialize(b))
        binviz.write_pgm(img.pixels, out / f"{b.id}.pgm")
    print(f"wrote {len(corpus)} images to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    corpus = binformat.load_corpus(args.manifest)
    labels = harness.corpus_labels(corpus)
    sp = harness.split(corpus, cfg.split_spec())
    model, history = harness.train_on(sp.train, sp.val, labels, cfg, "base")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(model, out)
    hist_path = args.history or str(out) + ".history.csv"
    lines = ["epoch,loss,val_accuracy"]
    lines += [f"{h['epoch']},{h['loss']:.6f},{h['val_accuracy']:.6f}" for h in history]
    Path(hist_path).write_text("\n".join(lines) + "\n")
    print(f"checkpoint: {out}")
    print(f"history: {hist_path}")
    return 0


def cmd_eval(args) -> int:
    model = nn.load_checkpoint(args.checkpoint)
    corpus = binformat.load_corpus(args.manifest)
    if args.origin:
        corpus = [b for b in corpus if b.origin == args.origin]
    labels = model.class_labels or harness.corpus_labels(corpus)
    metrics = harness.evaluate(model, corpus, labels)
    text = json.dumps(metrics.to_dict(), sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(args.out)
    else:
        sys.stdout.write(text)
    return 0


def cmd_obfuscate(args) -> int:
    cfg = load_config(args.config)
    corpus = binformat.load_corpus(args.manifest)
    transformed, report = obfusc.transform_corpus(
        corpus, args.mode, seed=derive_seed(cfg.seed, "obfuscate"),
        morph_passes=args.passes, packer_cmd=cfg.packer_cmd)
    # manifests require every parent to resolve, so the transformed corpus
    # ships together with the base samples it derives from
    parents = {t.parent_id for t in transformed}
    out = Path(args.out)
    binformat.save_corpus([b for b in corpus if b.id in parents] + transformed, out)
    (out / "conversion_report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    print(str(out / "manifest.jsonl"))
    return 0


def cmd_augment(args) -> int:
    cfg = load_config(args.config)
    corpus = binformat.load_corpus(args.manifest)
    enhanced, counts = obfusc.build_enhanced_training_set(
        corpus, args.pack_fraction, args.morph_fraction,
        seed=derive_seed(cfg.seed, "augment"), morph_passes=cfg.morph_passes)
    out = Path(args.out)
    binformat.save_corpus(enhanced, out)
    (out / "augment_counts.json").write_text(
        json.dumps(counts, sort_keys=True, indent=2) + "\n")
    print(str(out / "manifest.jsonl"))
    return 0


def _heatmaps_for_sample(model, tensor: np.ndarray, cls: int, methods: list[str],
                         cfg: Config) -> dict[str, xai.Heatmap]:
    maps = {}
    for method in methods:
        if method == xai.OCCLUSION:
            maps[method] = xai.occlusion_map(model, tensor, window=cfg.occlusion_window,
                                             stride=cfg.occlusion_stride,
                                             baseline=cfg.xai_baseline, target_class=cls)
        elif method == xai.HIRESCAM:
            maps[method] = xai.hirescam(model, tensor, cls)
        elif method == xai.SHAP:
            seg = xai.Segmentation.regular_grid(cfg.input_side, cfg.shap_grid)
            maps[method] = xai.kernel_shap(model, tensor, seg, background=cfg.xai_baseline,
                                           n_coalitions=cfg.shap_coalitions,
                                           seed=derive_seed(cfg.seed, "shap"),
                                           target_class=cls)
    return maps


def cmd_explain(args) -> int:
    cfg = load_config(args.config)
    model = nn.load_checkpoint(args.checkpoint)
    cfg.input_side = model.input_side
    corpus = binformat.load_corpus(args.manifest)
    labels = model.class_labels or harness.corpus_labels(corpus)
    label_idx = {name: i for i, name in enumerate(labels)}
    methods = [xai.OCCLUSION, xai.HIRESCAM, xai.SHAP] if args.method == "all" else [args.method]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.sample:
        picked = [b for b in corpus if b.id == args.sample]
        if not picked:
            raise ValidationError(f"sample id {args.sample!r} not in manifest")
    elif args.family:
        picked = [b for b in corpus if b.family == args.family]
        if not picked:
            raise ValidationError(f"family {args.family!r} not in manifest")
    else:
        raise ValidationError("explain needs --sample or --family")

    per_method: dict[str, list[xai.Heatmap]] = {m: [] for m in methods}
    for b in picked:
        tensor = binviz.resize_to_input(
            binviz.bytes_to_image(binformat.serialize(b)), cfg.input_side).values
        cls = int(label_idx[b.family]) if args.family else nn.predict(model, tensor)[0]
        maps = _heatmaps_for_sample(model, tensor, cls, methods, cfg)
        for m, h in maps.items():
            per_method[m].append(h)
            if args.sample:
                binviz.write_real_map(h.raw, out / f"{b.id}.{m}.pgm",
                                      meta={"method": m, "class": labels[cls], **h.meta})

    finals: dict[str, xai.Heatmap] = {}
    for m, hs in per_method.items():
        final = xai.cumulative_heatmap(hs) if args.family else hs[0]
        finals[m] = final
        if args.family:
            binviz.write_real_map(final.raw, out / f"{args.family}.{m}.cumulative.pgm",
                                  meta={"method": m, "class": args.family,
                                        "samples": len(hs)})
    if len(methods) > 1:
        scores = []
        names = sorted(finals)
        for i, a in enumerate(names):
            for b2 in names[i + 1:]:
                s = xai.agreement(finals[a], finals[b2], k=args.topk)
                scores.append({"pair": list(s.pair), "iou_topk": s.iou_topk,
                               "rank_corr": s.rank_corr, "k": s.k})
        (out / "agreement.json").write_text(json.dumps(scores, sort_keys=True, indent=2) + "\n")
    if args.grid:
        binviz.write_pgm(xai.grid_overlay(cfg.input_side, cfg.input_side // cfg.shap_grid),
                         out / "grid.pgm")
    print(str(out))
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    corpus = _corpus_for(cfg)
    report, models = harness.run_full_experiment(corpus, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(harness.report_to_json(report))
    (out / "grid.csv").write_text(harness.metrics_grid_to_csv(report["grid"]))
    for name, model in models.items():
        nn.save_checkpoint(model, out / f"{name}.ckpt")
    print(str(out / "report.json"))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="malvis",
                                 description="byte-image classifier robustness testbed")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic labeled corpus")
    p.add_argument("--spec", help="family spec JSON (omit for the built-in five families)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--scale", type=float, default=1.0, help="scale per-family counts")
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("convert", help="corpus manifest -> grayscale PGM byte images")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("train", help="train the classifier on a corpus manifest")
    p.add_argument("manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="history CSV path (default: <out>.history.csv)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--origin", choices=["base", "packed", "morphed"],
                   help="restrict to samples of one origin")
    p.add_argument("--out", help="metrics JSON path (default: stdout)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("obfuscate", help="pack or morph every applicable sample")
    p.add_argument("manifest")
    p.add_argument("--mode", choices=["pack", "morph"], required=True)
    p.add_argument("--passes", type=int, default=1, help="morph passes")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_obfuscate)

    p = sub.add_parser("augment", help="append packed/morphed copies of seeded subsets")
    p.add_argument("manifest")
    p.add_argument("--pack-fraction", type=float, default=1.0)
    p.add_argument("--morph-fraction", type=float, default=1.0)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("explain", help="heatmaps for a sample or a whole family")
    p.add_argument("checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sample", help="sample id")
    p.add_argument("--family", help="family label (cumulative heatmaps)")
    p.add_argument("--method", choices=["occlusion", "hirescam", "shap", "all"],
                   default="all")
    p.add_argument("--topk", type=int, default=16, help="top-k cells for agreement")
    p.add_argument("--grid", action="store_true",
                   help="also export a grid-overlay companion image")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("experiment", help="full pipeline: grid, progressive, sensitivity")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_experiment)

    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except MalvisError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
