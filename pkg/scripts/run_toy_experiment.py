"""End-to-end desk-scale experiment: generate the synthetic corpus, train the
toy model, evaluate Stage-1, run the automated refinement report, and sweep
the opening-kernel/density grid.

    python3 scripts/run_toy_experiment.py --root runs/toy

Roughly an hour on one CPU core, minutes on a few cores. Pass --quick for a
small smoke-scale run (untrained-quality outputs, but every stage executes).
"""

import argparse
import sys
from pathlib import Path

REPO = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO / "src"))

from roadprompt.cli import main as cli  # noqa: E402


def run(args: list[str]):
    print(f"\n$ roadprompt {' '.join(args)}", flush=True)
    code = cli(args)
    if code != 0:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", type=Path, default=REPO / "runs" / "toy")
    parser.add_argument("--count", type=int, default=500)
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--quick", action="store_true", help="tiny corpus, 2 epochs")
    args = parser.parse_args()

    data = args.root / "data"
    run_dir = args.root / "run"
    reports = args.root / "reports"
    count = 40 if args.quick else args.count

    run(["gen-data", "--out", str(data), "--count", str(count), "--seed", str(args.seed)])
    train_args = [
        "train", "--data", str(data), "--out", str(run_dir),
        "--config", str(REPO / "configs" / "toy.yaml"),
    ]
    if args.quick:
        train_args += ["--epochs", "2"]
    run(train_args)

    ckpt = str(run_dir / "last.pt")
    run(["eval", "--checkpoint", ckpt, "--data", str(data), "--out", str(reports)])
    run([
        "simulate", "--checkpoint", ckpt, "--data", str(data),
        "--fnm-kernel", "3", "--fpm-kernel", "7", "--density", "1",
        "--out", str(reports),
    ])
    run([
        "sweep", "--checkpoint", ckpt, "--data", str(data),
        "--fnm-kernels", "1,3,5,7", "--densities", "1,2,4",
        "--out", str(reports),
    ])
    print(f"\nartifacts under {args.root}")
    print(f"serve the interactive UI with:\n  roadprompt serve --checkpoint {ckpt} "
          f"--static-dir {REPO / 'frontend'} --port 8008")


if __name__ == "__main__":
    main()
