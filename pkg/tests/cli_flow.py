"""Runs every CLI subcommand once with tiny budgets and collects the produced files."""

from pathlib import Path

from safemark.cli import main

TINY = ["--base-budget", "4", "--budget", "4", "--stage2-budget", "4", "--batch", "4"]


def run(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, (argv, code)


def cli_flow(root: Path, seed: int = 1) -> dict[str, bytes]:
    home, data, out = root / "home", root / "data", root / "out"
    h = ["--home", home]
    run("make-dataset", "--out", data, "--n-images", 6, "--n-watermarks", 3, "--seed", seed)
    run(*h, "train-stage1", "--data", data, "--seed", seed, *TINY)
    run(*h, "finetune", "--data", data, "--seed", seed, *TINY)
    run(*h, "wm", "add", "--id", "logo", "--file", data / "watermark_00000.png")
    run(*h, "wm", "list")
    pairs = root / "pairs.tsv"
    pairs.write_text("a photo with my logo\tlogo\na photo with watermark [V] wm-001\twm-001\n")
    run(*h, "wm", "fit", "--pairs", pairs, "--steps", 20, "--seed", seed)
    run(*h, "generate", "--prompt", "a church with watermark [V]", "--image", data / "image_00000.png",
        "--lambda", 10, "--steps", 50, "--seed", seed, "--out", out / "gen.png")
    run(*h, "generate", "--prompt", "my avatar watermark [U]", "--user-watermark", data / "watermark_00001.png",
        "--lambda", 4, "--steps", 8, "--seed", seed, "--out", out / "synth.png")
    run(*h, "extract", "--image", out / "gen.png", "--out", out / "wm.png")
    run(*h, "verify", "--image", out / "gen.png")
    run(*h, "attack", "--image", out / "gen.png", "--kind", "combined", "--seed", seed, "--out", out / "att.png")
    run(*h, "report", "--data", data, "--out", out / "report", "--n", 3, "--steps", 8, "--lambda", 2,
        "--seed", seed)
    run(*h, "sweep-lambda", "--data", data, "--out", out / "lam", "--n", 2, "--steps", 16, "--seed", seed)
    run(*h, "sweep-gamma", "--data", data, "--out", out / "gam", "--seed", seed, *TINY)
    files = {}
    for base in (home, out):
        for p in sorted(base.rglob("*")):
            if p.is_file() and not p.name.endswith(".lock"):
                files[str(p.relative_to(root))] = p.read_bytes()
    return files
