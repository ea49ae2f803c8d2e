# coding: utf-8

# # The reverse-mode autodiff engine
#
# Guidance needs exact gradients of scalar costs with respect to sampled
# trajectories, and the denoiser needs gradients of its training loss with
# respect to every parameter. Both run on the same small tape-based
# engine: a Tensor wraps a float64 array, every op records its parents and
# a backward rule, and `backward` walks the recorded graph once in reverse
# topological order. Single-threaded float64 plus a fixed traversal order
# makes every gradient bit-reproducible.

import numpy as np

from frenetsim import grad as G

# ## Scalars first

x = G.Tensor(3.0, requires_grad=True)
y = G.mul(x, x)              # y = x^2
z = G.add(y, G.mul(x, 2.0))  # z = x^2 + 2x
G.backward(z)
print("dz/dx at x=3:", x.grad, "(analytic: 2x + 2 = 8)")

# ## Arrays and broadcasting
#
# Ops follow numpy broadcasting; gradients un-broadcast by summing over the
# expanded axes, so shapes always round-trip.

a = G.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
b = G.Tensor(np.array([10.0, 20.0]), requires_grad=True)
out = G.tsum(G.mul(a, b))
G.backward(out)
print("d(sum(a*b))/da:\n", a.grad)
print("d(sum(a*b))/db:", b.grad, "(columns of a summed)")

# ## A finite-difference spot check
#
# The whole test suite leans on central finite differences as the oracle;
# here is the pattern in miniature for a composite expression.

def f(v):
    t = G.Tensor(v, requires_grad=isinstance(v, np.ndarray) and True)
    expr = G.tmean(G.square(G.sin(t)))
    return t, expr

v0 = np.array([0.3, -1.2, 2.2])
t, expr = f(v0)
G.backward(expr)
analytic = t.grad.copy()

eps = 1e-6
fd = np.zeros_like(v0)
for i in range(v0.size):
    vp, vm = v0.copy(), v0.copy()
    vp[i] += eps
    vm[i] -= eps
    fd[i] = (f(vp)[1].item() - f(vm)[1].item()) / (2 * eps)
print("analytic:", np.round(analytic, 6))
print("central FD:", np.round(fd, 6))
print("max abs diff:", np.abs(analytic - fd).max())

# ## Kinked ops have pinned conventions
#
# relu'(0) = 0, and ties in min/max route the gradient to the first
# argument. Deterministic conventions matter more than the specific choice:
# the sampler must see the same gradient on every run.

r = G.Tensor(np.array([-1.0, 0.0, 1.0]), requires_grad=True)
G.backward(G.tsum(G.relu(r)))
print("relu'([-1, 0, 1]) =", r.grad)

# ## no_grad for inference
#
# Sampling calls the denoiser hundreds of times; wrapping those calls in
# `no_grad()` skips tape construction entirely.

with G.no_grad():
    silent = G.mul(x, x)
print("inside no_grad, requires_grad =", silent.requires_grad)
