"""Train a small model pair on the synthetic corpus, watermark, extract, verify, attack.

Budgets are tiny by default so this finishes in a few minutes on one CPU core;
the quality figures quoted in the README need the budgets used by the
acceptance suite (pass --full).

Run: python demos/toy_pipeline.py [--full] [--out DIR]
"""

import argparse
from pathlib import Path

from safemark import evalharness as ev
from safemark import pipeline
from safemark.corpus import synth_images, synth_watermarks
from safemark.datamodel import RunConfig, save_image
from safemark.trigger import TriggerRegistry, register_watermark

ap = argparse.ArgumentParser()
ap.add_argument("--full", action="store_true")
ap.add_argument("--out", type=Path, default=Path("demo_out"))
args = ap.parse_args()
pipeline.deterministic_mode()

if args.full:
    cfg = RunConfig(base_budget=4000, budget=2000, stage2_budget=5000)
    n_img = 512
else:
    cfg = RunConfig(base_budget=300, budget=200, stage2_budget=300)
    n_img = 64
images = synth_images(n_img, seed=0)
wms = synth_watermarks(16, seed=0)
ids = [f"wm-{k:03d}" for k in range(len(wms))]

ae, curves = pipeline.train_autoencoder(images, wms, cfg)
print(f"stage 1: image loss {curves[0]['img']:.4f} -> {curves[-1]['img']:.4f}, "
      f"watermark loss {curves[0]['wm']:.4f} -> {curves[-1]['wm']:.4f}")
den, c2 = pipeline.train_denoiser(ae, images, wms, pipeline.prompts_for(ids), cfg)
print(f"stage 2: loss {c2[0]['loss']:.4f} -> {c2[-1]['loss']:.4f}")
models = pipeline.Models(ae, den)

reg = TriggerRegistry()
for wid, w in zip(ids, wms):
    reg = register_watermark(reg, wid, w)

# watermark eight held-out images, each with its own registered watermark
held = synth_images(8, seed=0, offset=10_000)
data = ev.EvalSet(held, wms[:8], ids[:8], pipeline.prompts_for(ids[:8]))
marked, keys = ev.watermark_set(models, data, cfg)
ext = pipeline.extract_watermark(marked, ae)
print(f"key {keys[0]}")
print(f"image PSNR {ev.psnr(marked, held):.2f} dB, extracted watermark PSNR {ev.psnr(ext, data.wms):.2f} dB")

# detection: a watermarked image should match its id, a pristine one should not
hit = ev.detect(marked[0], reg, ae, tau=15.0)
miss = ev.detect(held[0], reg, ae, tau=15.0)
print(f"marked -> {hit.best_id} at {hit.score:.1f} dB accepted={hit.accepted}")
print(f"pristine -> {miss.best_id} at {miss.score:.1f} dB accepted={miss.accepted}")

out = ev.out_dir(args.out)
for spec in ev.TABLE_ATTACKS:
    att = ev.attack(marked, spec)
    print(f"{spec.label:>12}: image PSNR {ev.psnr(att, held):6.2f} dB, "
          f"watermark PSNR {ev.psnr(pipeline.extract_watermark(att, ae), data.wms):6.2f} dB")
save_image(ev.image_grid(list(held[:4]) + list(marked[:4]) + list(ext[:4]) +
                         [ev.pixel_diff(a, b) for a, b in zip(held[:4], marked[:4])], 4), out / "grid.png")
print("wrote", out / "grid.png")
