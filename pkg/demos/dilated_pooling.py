"""Dilated pooling versus strided convolution on a toy feature map.

A stride-2 convolution only ever looks at one of the four phase sub-grids of
its input (rows and columns of matching parity), so three quarters of the
positions never influence the output.  Dilated pooling applies the same
kernel to all four sub-grids and sums, which equals a 2x2 sum-pool followed
by the convolution.

    python3 demos/dilated_pooling.py
"""

import numpy as np

from scenenet.layers import ConvParams, conv2d_forward, dilated_pooling, phase_decompose, pool2d

rng = np.random.default_rng(0)

ramp = np.arange(16.0).reshape(1, 1, 4, 4)
grids = phase_decompose(ramp)
print("input\n", ramp[0, 0])
for name, grid in zip(("even/even", "even/odd", "odd/even", "odd/odd"), grids):
    print(f"{name} sub-grid\n", grid[0, 0])

# Same 3x3 kernel three ways.
x = rng.standard_normal((1, 4, 8, 8))
w = rng.standard_normal((6, 4, 3, 3))
dp = dilated_pooling(x, ConvParams(w, 1, 1))
via_pool = conv2d_forward(pool2d(x, "sum"), ConvParams(w, 1, 1))
strided = conv2d_forward(x, ConvParams(w, 2, 1))
print("\noutput shape (all three):", dp.shape, via_pool.shape, strided.shape)
print("max |DP - conv(sumpool)|:", float(np.abs(dp - via_pool).max()))


# Which input positions can change the output at all?
def sensitivity(fn):
    base = fn(x)
    hit = np.zeros(x.shape[2:], bool)
    for i in range(8):
        for j in range(8):
            probe = x.copy()
            probe[:, :, i, j] += 1.0
            hit[i, j] = not np.allclose(fn(probe), base)
    return hit


w1 = rng.standard_normal((6, 4, 1, 1))
strided_1x1 = sensitivity(lambda z: conv2d_forward(z, ConvParams(w1, 2, 0)))
dp_1x1 = sensitivity(lambda z: dilated_pooling(z, ConvParams(w1, 1, 0)))
print(f"\n1x1 projection: strided sees {strided_1x1.mean():.0%} of positions, dilated pooling {dp_1x1.mean():.0%}")
