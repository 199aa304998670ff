"""
Layers by hand, checked by finite differences
==============================================

Each op returns its output and a context; the backward pass takes the
upstream gradient and that context. Here a 2x2 transposed convolution
doubles the resolution, a max pool undoes it, and the whole gradient-check
suite runs at the end.
"""

import numpy as np

from landseg import layers as L
from landseg.gradcheck import run_suite

x = np.arange(8.0).reshape(1, 2, 2, 2)

# upsample 2 -> 3 channels and 2x2 -> 4x4 pixels
up = L.ConvParams(np.ones((3, 2, 2, 2)), np.zeros(3), stride=2, padding="valid")
y, ctx_up = L.conv_transpose2d_forward(x, up)
print("upsampled", x.shape, "->", y.shape)

# pooling brings the spatial size back; gradients route to the argmax
z, ctx_pool = L.maxpool2d_forward(y, 2)
print("pooled back to", z.shape)

g = L.maxpool2d_backward(np.ones_like(z), ctx_pool)
dx, dk, db = L.conv_transpose2d_backward(g, ctx_up)
print("grad wrt input\n", dx[0, 0])
print("bias grad", db)  # one per output channel, summed over pixels

# batch norm in train mode normalizes each channel over the batch
stats = L.RunningStats.fresh(3, np.float64)
bn, _ = L.batchnorm2d_forward(y, np.ones(3), np.zeros(3), stats, "train")
print("per-channel mean after BN", bn.mean(axis=(0, 2, 3)).round(12))

# every op and a depth-1 U-Net with BCE, at float64
for report in run_suite(seed=0):
    print(report.line())
