"""
Reverse-mode gradients on numpy arrays
======================================

A short tour of the tensor type underneath every model in the package:
build a small expression, backpropagate, and compare against central
finite differences.
"""

import numpy as np

from dpcn.autograd import Tensor
from dpcn.gradcheck import finite_difference_check
from dpcn import functional as F

rng = np.random.default_rng(0)

# a tiny convolution followed by a global mean; double precision throughout
x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
y = F.global_avg_pool(F.conv2d(x, w, padding=1)).sum()
y.backward()
print("d y / d w has shape", w.grad.shape)

# the same graph checked numerically, one leaf at a time
for name, leaf in (("x", x), ("w", w)):
    err = finite_difference_check(lambda _: F.global_avg_pool(F.conv2d(x, w, padding=1)).sum(), leaf)
    print("max relative error in d y / d %s vs finite differences: %.2e" % (name, err))

# the least-squares discriminator loss used by the training engine
d = Tensor(np.array([[0.9], [0.2], [0.6]]), requires_grad=True)
loss = F.disc_l2_loss(d, 1.0)
loss.backward()
print("L2 loss against target 1:", round(loss.item(), 4), " gradient:", d.grad.ravel())
