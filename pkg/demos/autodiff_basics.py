"""
Reverse and forward mode on one tape
====================================

Differentiate a small network both ways and check the two agree.
"""
import numpy as np

from georecon import autodiff as ad
from georecon.autodiff import Tape, Tensor

rng = np.random.default_rng(0)
w1, w2 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))


def net(x):
    h = ad.tanh(ad.matmul(ad.reshape(x, (1, 3)), Tensor(w1)))
    return ad.matmul(h, Tensor(w2)).reshape(2)


# gradient of a scalar loss
with Tape():
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    loss = ad.sum(net(x) * net(x))
    grads = ad.backward(loss)
print("d loss / dx =", grads[x])

# one recorded forward pass serves any number of JVPs and VJPs
x0 = rng.standard_normal(3)
lin = ad.linearize(net, x0)
v, u = rng.standard_normal(3), rng.standard_normal(2)
print("<u, J v>   =", u @ lin.jvp(v))
print("<J^T u, v> =", lin.vjp(u) @ v)

# finite differences as a sanity check
print("fd J v     =", ad.jvp_fd(lambda z: net(Tensor(z)).data, x0, v))
print("ad J v     =", lin.jvp(v))
