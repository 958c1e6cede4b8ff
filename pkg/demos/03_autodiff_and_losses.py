"""The reverse-mode engine at work: the adjoint identity, a finite-difference
gradient check, and the clipped losses on real shapes."""

import numpy as np

from pscan import autodiff as ad
from pscan.alrc import AlrcState, alrc

rng = np.random.default_rng(0)

# adjoint identity: <conv(x), y> == <x, convT(y)>
x = rng.normal(size=(1, 2, 12, 12)).astype(np.float32)
w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
cx = ad.conv2d(ad.Tensor(x), ad.Tensor(w), stride=2, pad="same").data
y = rng.normal(size=cx.shape).astype(np.float32)
ty = ad.conv2d_transpose(ad.Tensor(y), ad.Tensor(w), stride=2).data
lhs, rhs = float((cx * y).sum()), float((x * ty).sum())
print(f"adjoint identity: <conv(x),y> = {lhs:.6f}, <x,convT(y)> = {rhs:.6f}, "
      f"rel diff {abs(lhs - rhs) / abs(lhs):.2e}")

# gradient check of a small conv stack against central differences
weight = ad.Tensor(rng.normal(size=(2, 2, 3, 3)) * 0.3, requires_grad=True)
inp = rng.normal(size=(1, 2, 8, 8))
target = rng.normal(size=(1, 2, 8, 8))


def closure(params):
    h = ad.conv2d(ad.Tensor(inp, dtype=np.float64), params[0], 1, "same")
    h = ad.relu(h)
    return ad.mean(ad.square(ad.sub(h, ad.Tensor(target, dtype=np.float64))))


err = ad.gradient_check(closure, [weight], epsilon=1e-5)
print(f"conv+relu gradient check: max relative error {err:.2e}")

# adaptive loss clipping in action
state = AlrcState()
print(f"\nALRC threshold starts at {state.threshold():.1f}")
for value in (10.0, 60.0, 200.0, 12.0):
    t = ad.Tensor([[value]], requires_grad=True)
    with ad.Graph() as g:
        out = alrc(ad.mean(t), state)
    g.backward(out)
    print(f"loss {value:6.1f} -> value {out.item():7.3f}, "
          f"gradient scale {float(t.grad[0, 0]):.3f}, "
          f"threshold now {state.threshold():.3f}")
