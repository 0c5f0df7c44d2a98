"""Command-line entry point (``safemark``).

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 missing checkpoint
or registry state.  ``SAFEMARK_HOME`` selects the default directory for
checkpoints, the watermark registry and the provenance ledger.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import pipeline
from .corpus import IMAGE_FAMILIES, WATERMARK_FAMILIES, SyntheticCorpusSpec, load_manifest, make_dataset
from .datamodel import (DomainError, Ledger, RunConfig, SafemarkError, StateError, file_digest, load_image,
                        save_image)

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_STATE = 0, 1, 2, 3
DEFAULT_TAU = 15.0
DETECTION_FILE = "detection.json"

log = logging.getLogger("safemark")

# flag dest -> RunConfig field
CONFIG_FLAGS = {
    "lam": "lam", "steps": "T", "gamma": "gamma", "cfg_scale": "cfg_scale", "eta": "eta", "seed": "seed",
    "resolution": "resolution", "batch": "batch", "lr": "lr", "budget": "budget", "base_budget": "base_budget",
    "stage2_budget": "stage2_budget", "schedule": "schedule", "time_bias": "time_bias",
}


def _config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", type=Path, help="flat key=value file mirroring RunConfig fields")
    g.add_argument("--seed", type=int)
    g.add_argument("--lambda", dest="lam", type=int, help="number of injection steps")
    g.add_argument("--steps", type=int, help="diffusion steps T")
    g.add_argument("--gamma", type=float)
    g.add_argument("--cfg-scale", type=float)
    g.add_argument("--eta", type=float)
    g.add_argument("--resolution", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--budget", type=int, help="stage-1 training steps")
    g.add_argument("--base-budget", type=int)
    g.add_argument("--stage2-budget", type=int)
    g.add_argument("--schedule", choices=("linear-vp", "cosine"))
    g.add_argument("--time-bias", choices=("uniform", "early", "mid", "late"))


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {field: getattr(args, dest) for dest, field in CONFIG_FLAGS.items()
                 if getattr(args, dest, None) is not None}
    return RunConfig.from_mapping(overrides, cfg) if overrides else cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safemark", description="Keyed latent-diffusion watermarking toolkit.")
    p.add_argument("--home", type=Path, help="checkpoint/registry/ledger directory (default $SAFEMARK_HOME)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-dataset", help="write a deterministic synthetic corpus")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--n-images", type=int, default=64)
    s.add_argument("--n-watermarks", type=int, default=16)
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--image-family", choices=IMAGE_FAMILIES, default="shapes")
    s.add_argument("--watermark-family", choices=WATERMARK_FAMILIES, default="qr-like")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("train-stage1", help="pretrain the autoencoder and train the watermark stage")
    s.add_argument("--data", type=Path, required=True)
    _config_args(s)

    s = sub.add_parser("finetune", help="fine-tune the latent denoiser (stage 2)")
    s.add_argument("--data", type=Path, required=True)
    _config_args(s)

    s = sub.add_parser("wm", help="watermark registry")
    wsub = s.add_subparsers(dest="wm_command", required=True)
    a = wsub.add_parser("add")
    a.add_argument("--id", required=True)
    a.add_argument("--file", type=Path, required=True)
    wsub.add_parser("list")
    f = wsub.add_parser("fit", help="fit the trigger layer on prompt<TAB>id lines")
    f.add_argument("--pairs", type=Path, required=True)
    f.add_argument("--steps", type=int, default=300)
    f.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("generate", help="watermark an image (or synthesize one) and log provenance")
    s.add_argument("--prompt", required=True)
    s.add_argument("--image", type=Path, help="source image; omit for synthesis")
    s.add_argument("--watermark-id")
    s.add_argument("--user-watermark", type=Path, help="watermark used when the prompt contains [U]")
    s.add_argument("--out", type=Path, required=True)
    _config_args(s)

    s = sub.add_parser("extract", help="decode the watermark carried by an image")
    s.add_argument("--image", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("verify", help="extract, match against the registry and look up the ledger")
    s.add_argument("--image", type=Path, required=True)
    s.add_argument("--tau", type=float, help="acceptance threshold in dB (default: calibrated value)")

    s = sub.add_parser("attack", help="apply one robustness attack")
    s.add_argument("--image", type=Path, required=True)
    s.add_argument("--kind", choices=("rotate90", "resize", "brightness", "crop", "combined"), required=True)
    s.add_argument("--factor", type=float)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)

    for name, helptext in (("report", "detection calibration and robustness table"),
                           ("sweep-lambda", "injection-count and time-window sweep"),
                           ("sweep-gamma", "watermark-loss weight sweep")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--data", type=Path, required=True)
        s.add_argument("--out", type=Path, required=True)
        s.add_argument("--n", type=int, default=50, help="number of evaluation pairs")
        _config_args(s)
    return p


# ---------------------------------------------------------------------------
# commands


def _out(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _home(args) -> Path:
    return args.home or pipeline.default_home()


def _registry(home: Path):
    from .trigger import TriggerRegistry

    return TriggerRegistry.load(home / "registry")


def _dataset_ids(n: int) -> list[str]:
    return [f"wm-{k:03d}" for k in range(n)]


def cmd_make_dataset(args) -> int:
    spec = SyntheticCorpusSpec(args.n_images, args.n_watermarks, args.resolution, args.image_family,
                               args.watermark_family, args.seed)
    rows = make_dataset(spec, args.out)
    print(f"wrote {len(rows)} files to {args.out}")
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    from .autoencoder import write_curves

    cfg = resolve_config(args)
    images, wms = load_manifest(args.data, cfg.resolution)
    ae, curves = pipeline.train_autoencoder(images, wms, cfg)
    home = _home(args)
    digest = pipeline.save_stage1(ae, home, cfg)
    write_curves(curves, home / "stage1_curves.csv")
    print(f"stage-1 checkpoint {home / pipeline.STAGE1_FILE} sha256={digest}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .diffuser import write_stage2_curves
    from .trigger import register_watermark

    cfg = resolve_config(args)
    home = _home(args)
    models = pipeline.load_models(home, need_denoiser=False)
    images, wms = load_manifest(args.data, cfg.resolution)
    ids = _dataset_ids(wms.shape[0])
    model, curves = pipeline.train_denoiser(models.ae, images, wms, pipeline.prompts_for(ids), cfg)
    digest = pipeline.save_stage2(model, home, cfg)
    write_stage2_curves(curves, home / "stage2_curves.csv")
    # dataset watermarks become registry entries under their training ids
    reg = _registry(home)
    for wid, w in zip(ids, wms):
        if wid not in reg.ids:
            reg = register_watermark(reg, wid, w)
    reg.save(home / "registry")
    print(f"stage-2 checkpoint {home / pipeline.STAGE2_FILE} sha256={digest}")
    return EXIT_OK


def cmd_wm(args) -> int:
    from .trigger import fit_trigger, register_watermark

    home = _home(args)
    reg = _registry(home)
    if args.wm_command == "add":
        reg = register_watermark(reg, args.id, load_image(args.file))
        reg.save(home / "registry")
        print(f"registered {args.id} ({len(reg)} entries)")
    elif args.wm_command == "list":
        for wid in reg.ids:
            print(wid)
    else:
        pairs = []
        for line in args.pairs.read_text(encoding="utf-8").splitlines():
            if line.strip():
                prompt, _, wid = line.rpartition("\t")
                pairs.append((prompt, wid.strip()))
        reg, losses = fit_trigger(reg, pairs, steps=args.steps, seed=args.seed)
        reg.save(home / "registry")
        print(f"trigger fit: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    home = _home(args)
    models = pipeline.load_models(home)
    source = load_image(args.image, cfg.resolution) if args.image else None
    user_wm = load_image(args.user_watermark, cfg.resolution) if args.user_watermark else None
    reg = _registry(home)
    res = pipeline.generate(args.prompt, source, None, cfg, models, registry=reg, watermark_id=args.watermark_id,
                            user_wm=user_wm, ledger=None)
    digest = save_image(res.image, _out(args.out))
    from .datamodel import ProvenanceRecord, utc_seconds

    record = ProvenanceRecord(digest, res.watermark_id, str(res.key), cfg.seed, utc_seconds(), args.prompt)
    Ledger(home / "ledger.jsonl").append(record)
    print(json.dumps({"out": str(args.out), "digest": digest, "watermark_id": res.watermark_id,
                      "key": str(res.key)}, sort_keys=True))
    return EXIT_OK


def cmd_extract(args) -> int:
    models = pipeline.load_models(_home(args), need_denoiser=False)
    img = load_image(args.image)
    digest = save_image(pipeline.extract_watermark(img, models.ae), _out(args.out))
    print(json.dumps({"out": str(args.out), "digest": digest}))
    return EXIT_OK


def _tau(home: Path, override: float | None) -> float:
    if override is not None:
        return override
    path = home / DETECTION_FILE
    if path.exists():
        return float(json.loads(path.read_text())["tau"])
    return DEFAULT_TAU


def cmd_verify(args) -> int:
    from .evalharness import detect

    home = _home(args)
    models = pipeline.load_models(home, need_denoiser=False)
    reg = _registry(home)
    if not reg.entries:
        raise StateError("watermark registry is empty")
    img = load_image(args.image)
    decision = detect(img, reg, models.ae, _tau(home, args.tau))
    record = Ledger(home / "ledger.jsonl").lookup(file_digest(args.image))
    print(json.dumps({
        "accepted": decision.accepted, "best_id": decision.best_id, "score": round(decision.score, 4),
        "threshold": round(decision.threshold, 4),
        "ledger": json.loads(record.to_json()) if record else None,
    }, sort_keys=True))
    return EXIT_OK


def cmd_attack(args) -> int:
    from .evalharness import AttackSpec, attack

    spec = AttackSpec(args.kind, args.factor)
    img = load_image(args.image)
    digest = save_image(attack(img, spec, args.seed), _out(args.out))
    print(json.dumps({"out": str(args.out), "attack": spec.label, "digest": digest}))
    return EXIT_OK


def _eval_set(args, cfg, reg):
    from .evalharness import EvalSet

    images, _ = load_manifest(args.data, cfg.resolution)
    n = min(args.n, images.shape[0])
    if not reg.entries:
        raise StateError("watermark registry is empty; run finetune or wm add first")
    ids = [reg.ids[i % len(reg)] for i in range(n)]
    wms = torch.stack([reg.get(i).watermark for i in ids])
    return EvalSet(images[:n], wms, ids, pipeline.prompts_for(ids))


def cmd_report(args) -> int:
    from . import evalharness as ev

    cfg = resolve_config(args)
    home = _home(args)
    models = pipeline.load_models(home)
    reg = _registry(home)
    data = _eval_set(args, cfg, reg)
    marked, _ = ev.watermark_set(models, data, cfg)
    pos = ev.detect_batch(marked, reg, models.ae, 0.0)
    neg = ev.detect_batch(data.images, reg, models.ae, 0.0)
    tau = ev.calibrate_threshold([d.score for d in pos], [d.score for d in neg])
    tpr, fpr = ev.rates([ev.DetectionDecision(d.best_id, d.score, tau, d.score >= tau) for d in pos],
                        [ev.DetectionDecision(d.best_id, d.score, tau, d.score >= tau) for d in neg], data.wm_ids)
    out = ev.out_dir(args.out)
    ev.write_csv(out / "detection.csv", ["tau", "tpr", "fpr", "n_pos", "n_neg"], [[tau, tpr, fpr, len(pos), len(neg)]])
    (home / DETECTION_FILE).write_text(json.dumps({"tau": tau}, sort_keys=True) + "\n")
    rows = ev.robustness_suite(models, data, reg, cfg, tau, out=out, marked=marked)
    for r in rows:
        print(f"{r['attack']:<16} psnr {r['psnr']:7.3f}  detect {r['detection_rate']:.3f}")
    print(f"tau {tau:.3f} dB  TPR {tpr:.3f}  FPR {fpr:.3f}")
    return EXIT_OK


def cmd_sweep_lambda(args) -> int:
    from . import evalharness as ev

    cfg = resolve_config(args)
    home = _home(args)
    models = pipeline.load_models(home)
    data = _eval_set(args, cfg, _registry(home))
    for r in ev.sweep_lambda(models, data, cfg, out=args.out):
        print(f"lambda {r['lambda']:>2} {r['bias']:<6} image {r['image_psnr']:7.3f}  wm {r['watermark_psnr']:7.3f}")
    return EXIT_OK


def cmd_sweep_gamma(args) -> int:
    from . import evalharness as ev
    from .autoencoder import pretrain_base

    cfg = resolve_config(args)
    images, wms = load_manifest(args.data, cfg.resolution)
    base = pretrain_base(images, wms, cfg, channels=pipeline.DEFAULT_AE_CHANNELS)
    k = min(4, images.shape[0], wms.shape[0])
    rows = ev.sweep_gamma(base, images, wms, cfg, out=args.out, probe=images[:k])
    for r in rows:
        print(f"gamma {r['gamma']:<5g} ratio {r['ratio']:.4f}")
    return EXIT_OK


COMMANDS = {
    "make-dataset": cmd_make_dataset, "train-stage1": cmd_train_stage1, "finetune": cmd_finetune, "wm": cmd_wm,
    "generate": cmd_generate, "extract": cmd_extract, "verify": cmd_verify, "attack": cmd_attack,
    "report": cmd_report, "sweep-lambda": cmd_sweep_lambda, "sweep-gamma": cmd_sweep_gamma,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    pipeline.deterministic_mode()
    try:
        return COMMANDS[args.command](args)
    except StateError as exc:
        print(f"safemark: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (SafemarkError, OSError, KeyError) as exc:
        print(f"safemark: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
