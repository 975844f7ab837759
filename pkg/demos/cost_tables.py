"""Cost of the backbones compared in the scene-recognition experiments.

Counts multiply-accumulates for a single 224x224 image (BN, activations and
pooling are free) and learned parameters, for the standard ResNet-50 at
several widths, the Deep-Narrow network (ResNet-101 at half width) with
each downsampling variant, and the two pooling baselines.

    python3 demos/cost_tables.py
"""

from scenenet import ArchSpec, build, report

ROWS = [
    ("ResNet-50 x1, 1000 classes", ArchSpec(50, 1.0, 1000)),
    ("ResNet-50 x1", ArchSpec(50, 1.0, 365)),
    ("ResNet-50 x0.5", ArchSpec(50, 0.5, 365)),
    ("ResNet-50 x0.25", ArchSpec(50, 0.25, 365)),
    ("ResNet-50 x2", ArchSpec(50, 2.0, 365)),
    ("Deep-Narrow", ArchSpec(101, 0.5, 365)),
    ("Deep-Narrow + dilated pooling", ArchSpec(101, 0.5, 365, "dilated")),
    ("Deep-Narrow, average-pool downsampling", ArchSpec(101, 0.5, 365, "avg")),
    ("Deep-Narrow, max-pool downsampling", ArchSpec(101, 0.5, 365, "max")),
]


def main():
    print(f"{'model':42s} {'GFLOPs':>7s} {'params (M)':>11s}")
    for title, spec in ROWS:
        # init=False skips random initialisation; counting only needs shapes
        rep = report(build(spec, init=False))
        print(f"{title:42s} {rep.total_gflops:7.2f} {rep.total_params_m:11.2f}")

    # Dilated pooling reuses the strided layer's weights and, under the MAC
    # convention, its cost: the sum-pool is free and the convolution runs at
    # the same half resolution the strided one produces.
    plain = report(build(ArchSpec(101, 0.5, 365), init=False))
    dp = report(build(ArchSpec(101, 0.5, 365, "dilated"), init=False))
    print("\nDP adds", dp.total_macs - plain.total_macs, "MACs and", dp.total_params - plain.total_params, "parameters")

    # The pooling baselines run the 3x3 convolution at full resolution before
    # pooling, which is where their extra quarter GFLOP comes from.
    avg = report(build(ArchSpec(101, 0.5, 365, "avg"), init=False))
    extra = {p: m for p, m, _ in avg.per_layer}
    print("largest per-layer increases for the average-pool baseline:")
    diffs = sorted(((extra[p] - m, p) for p, m, _ in plain.per_layer), reverse=True)[:3]
    for d, path in diffs:
        print(f"  {path:28s} +{d / 1e6:.1f}M MACs")


if __name__ == "__main__":
    main()
