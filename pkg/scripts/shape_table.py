"""Print the per-stage (C, T, H, W) table of a backbone configuration.

    python scripts/shape_table.py                      # full-size default
    python scripts/shape_table.py --frames 8 --size 16 --blocks 1 1 --growth 4
"""
import argparse

from stcn.backbone import BackboneConfig, stage_shapes


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--frames", type=int, default=32)
    parser.add_argument("--size", type=int, default=112)
    parser.add_argument("--channels", type=int, default=3)
    parser.add_argument("--blocks", type=int, nargs="+", default=None)
    parser.add_argument("--growth", type=int, default=None)
    args = parser.parse_args()

    overrides = {"frames": args.frames, "height": args.size, "width": args.size, "in_channels": args.channels}
    if args.blocks:
        overrides["block_layers"] = tuple(args.blocks)
    if args.growth:
        overrides["growth_rate"] = args.growth
    cfg = BackboneConfig(**overrides)
    cfg.validate()
    print(f"{'stage':12s} {'C':>5s} {'T':>4s} {'H':>4s} {'W':>4s}")
    for s in stage_shapes(cfg):
        print(f"{s.name:12s} {s.channels:5d} {s.frames:4d} {s.height:4d} {s.width:4d}")


if __name__ == "__main__":
    main()
