"""Tour of the reverse-mode core: tapes, gradients, finite-difference checks.

Every trainable piece of daest runs on daest.ndcore, a small tape-based
autodiff over float64 numpy arrays.  This script builds a few graphs by
hand, checks their gradients against central differences, and fits a tiny
network with the bundled Adam so the moving parts are visible in one place.
"""

import numpy as np

from daest import ndcore as nd
from daest.ndcore import DiffTensor, Tape, grad_check

rng = np.random.default_rng(0)

# 1. a scalar graph: loss = mean((x @ w - t)^2), gradient w.r.t. w
tape = Tape()
x = DiffTensor.constant(rng.normal(size=(5, 3)))
t = DiffTensor.constant(rng.normal(size=(5, 2)))
w = DiffTensor(rng.normal(size=(3, 2)), tape=tape)
err = nd.sub(nd.matmul(x, w), t)
loss = nd.mean_all(nd.mul(err, err))
tape.backward(loss)
print(f"loss {float(loss.values):.4f}, grad w has shape {w.grad.shape}")
print("analytic grad row 0:", np.round(w.grad[0], 4))

# the same gradient by central differences
eps = 1e-6
num = np.zeros_like(w.values)
for i in range(w.values.shape[0]):
    for j in range(w.values.shape[1]):
        for sign in (+1, -1):
            wp = w.values.copy()
            wp[i, j] += sign * eps
            e = x.values @ wp - t.values
            num[i, j] += sign * np.mean(e * e) / (2 * eps)
print("numeric  grad row 0:", np.round(num[0], 4))

# 2. grad_check does that loop for any differentiable closure
def f(leaf: DiffTensor) -> DiffTensor:
    h = nd.relu(nd.linear(leaf, w0, b0))
    return nd.sum_all(nd.mul(h, h))

w0 = DiffTensor.constant(rng.normal(size=(4, 6)))
b0 = DiffTensor.constant(rng.normal(size=6))
x0 = rng.normal(size=(3, 4))
err = grad_check(f, x0, rng=rng)
print(f"\ngrad_check on a relu layer: max rel err {err:.2e}")

# 3. fit y = sign-ish(x0*x1) with a 2-layer net and Adam
xs = rng.normal(size=(256, 2))
ys = (xs[:, 0] * xs[:, 1] > 0).astype(np.intp)

tape = Tape()
w1 = DiffTensor(rng.uniform(-0.5, 0.5, size=(2, 16)), tape=tape)
b1 = DiffTensor(np.zeros(16), tape=tape)
w2 = DiffTensor(rng.uniform(-0.25, 0.25, size=(16, 2)), tape=tape)
b2 = DiffTensor(np.zeros(2), tape=tape)
opt = nd.Adam([w1, b1, w2, b2], lr=0.01)

def logits_of(arr: np.ndarray) -> DiffTensor:
    h = nd.relu(nd.linear(DiffTensor.constant(arr), w1, b1))
    return nd.linear(h, w2, b2)

for epoch in range(200):
    logits = logits_of(xs)
    # cross entropy via log-sum-exp
    shifted = nd.sub(logits, logits.values.max(axis=1, keepdims=True))
    lse = nd.log(nd.sum_axis(nd.exp(shifted), axis=1))
    picked = nd.take_pairs(shifted, np.arange(len(ys)), ys)
    loss = nd.mean_all(nd.sub(lse, picked))
    tape.backward(loss)
    opt.step()
    tape.reset()
    if epoch % 50 == 0:
        acc = np.mean(logits.values.argmax(axis=1) == ys)
        print(f"epoch {epoch:3d}  loss {float(loss.values):.3f}  acc {acc:.2f}")

final = np.mean(logits_of(xs).values.argmax(axis=1) == ys)
print(f"final training accuracy on the XOR-like toy: {final:.2f}")
