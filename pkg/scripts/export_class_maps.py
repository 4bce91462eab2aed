#!/usr/bin/env python3
"""Export per-family average byte images and cumulative explanation
heatmaps for a trained checkpoint.

Writes, per family: the class-average image, one cumulative heatmap per
method (occlusion, hirescam, shap), and the pairwise agreement scores.
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from malvis import binformat, binviz, nn, xai
from malvis.config import Config
from malvis.seeding import derive_seed


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint")
    ap.add_argument("manifest")
    ap.add_argument("--out", default="runs/classmaps")
    ap.add_argument("--max-per-family", type=int, default=25)
    ap.add_argument("--seed", type=int, default=20250808)
    ap.add_argument("--coalitions", type=int, default=512,
                    help="SHAP coalition samples per image (lighter than the "
                         "library default; raise for sharper maps)")
    args = ap.parse_args()

    model = nn.load_checkpoint(args.checkpoint)
    corpus = binformat.load_corpus(args.manifest)
    labels = model.class_labels or sorted({b.family for b in corpus})
    cfg = Config(seed=args.seed, input_side=model.input_side,
                 shap_coalitions=args.coalitions, occlusion_stride=8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    by_family = {}
    for b in corpus:
        by_family.setdefault(b.family, []).append(b)

    for family in sorted(by_family):
        picked = sorted(by_family[family], key=lambda b: b.id)[:args.max_per_family]
        images = [binviz.bytes_to_image(binformat.serialize(b)) for b in picked]
        avg = binviz.average_image(images, cfg.input_side)
        binviz.write_real_map(avg, out / f"{family}.average.pgm",
                              meta={"family": family, "samples": len(picked)})

        cls = labels.index(family)
        seg = xai.Segmentation.regular_grid(cfg.input_side, cfg.shap_grid)
        per_method = {m: [] for m in (xai.OCCLUSION, xai.HIRESCAM, xai.SHAP)}
        for img in images:
            tensor = binviz.resize_to_input(img, cfg.input_side).values
            per_method[xai.OCCLUSION].append(xai.occlusion_map(
                model, tensor, cfg.occlusion_window, cfg.occlusion_stride,
                cfg.xai_baseline, target_class=cls))
            per_method[xai.HIRESCAM].append(xai.hirescam(model, tensor, cls))
            per_method[xai.SHAP].append(xai.kernel_shap(
                model, tensor, seg, cfg.xai_baseline, cfg.shap_coalitions,
                seed=derive_seed(args.seed, "shap", family), target_class=cls))
        finals = {m: xai.cumulative_heatmap(hs) for m, hs in per_method.items()}
        for m, h in finals.items():
            binviz.write_real_map(h.raw, out / f"{family}.{m}.pgm",
                                  meta={"family": family, "method": m,
                                        "samples": len(images)})
        pairs = []
        names = sorted(finals)
        for i, a in enumerate(names):
            for b2 in names[i + 1:]:
                s = xai.agreement(finals[a], finals[b2], k=16)
                pairs.append({"pair": list(s.pair), "iou_topk": s.iou_topk,
                              "rank_corr": s.rank_corr, "k": s.k})
        (out / f"{family}.agreement.json").write_text(
            json.dumps(pairs, sort_keys=True, indent=2) + "\n")
        print(f"{family}: {len(images)} samples -> 4 maps + agreement")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
