"""Run a config end to end, then retrain and evaluate the TCN with TSE ablated on the same features.

    python scripts/tse_ablation.py configs/synthetic.yaml --out runs/ablation
"""
import argparse
import json
import shutil
import sys
from pathlib import Path

import yaml

from stcn.cli import run


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config")
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--seed", type=int)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = yaml.safe_load(Path(args.config).read_text())
    seed = [] if args.seed is None else ["--seed", str(args.seed)]
    variants = {"tse": doc, "ablated": dict(doc, tcn={**doc.get("tcn", {}), "use_tse": False})}
    for name, variant in variants.items():
        (out / f"{name}.yaml").write_text(yaml.safe_dump(variant))

    def stcn(*argv, name):
        code = run([*argv, "--config", str(out / f"{name}.yaml"), "--out", str(out / name), *seed])
        if code:
            sys.exit(code)

    stcn("pipeline", name="tse")
    for part in ("dataset", "backbone", "features"):
        shutil.copytree(out / "tse" / part, out / "ablated" / part, dirs_exist_ok=True)
    stcn("train", "--stage", "tcn", name="ablated")
    stcn("eval", name="ablated")

    for name in variants:
        report = json.loads((out / name / "report" / "accuracy.json").read_text())
        print(f"{name:8s} accuracy {report['accuracy']:.4f} ({report['correct']}/{report['total']})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
