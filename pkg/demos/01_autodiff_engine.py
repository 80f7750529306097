"""Tour of the tensor engine: graphs, backward, Adam, gradient checks."""

import numpy as np

from gonogo import autodiff as ad
from gonogo.autodiff import Tensor
from gonogo.optim import Adam

# Tensors wrap float32 numpy arrays. Ops build a graph; backward() walks it.
x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32), requires_grad=True)
y = ad.tsum(ad.relu(x * x - Tensor(np.float32(2.0))))
y.backward()
print("x:\n", x.data)
print("d/dx sum(relu(x^2 - 2)):\n", x.grad)  # 2x where x^2 > 2, else 0

# A two-parameter line fit, by hand, with Adam. The data is y = 3x - 1.
rng = np.random.default_rng(0)
xs = rng.random((64, 1)).astype(np.float32)
ys = 3.0 * xs - 1.0

w = Tensor(np.zeros((1, 1), dtype=np.float32), requires_grad=True, name="w")
b = Tensor(np.zeros((1,), dtype=np.float32), requires_grad=True, name="b")
opt = Adam([w, b], lr=0.05)

for step in range(400):
    pred = ad.matmul(Tensor(xs), w) + b
    loss = ad.tmean((pred - Tensor(ys)) * (pred - Tensor(ys)))
    opt.zero_grad()
    loss.backward()
    opt.step()
print(f"fitted w={w.data.item():.3f} b={b.data.item():.3f} (target 3, -1), "
      f"loss={loss.data.item():.2e}")

# Finite differences vouch for every gradient the engine produces.
from gonogo.gradcheck import check_scalar_fn

fn = lambda: ad.tmean(ad.sigmoid(ad.matmul(Tensor(xs), w) + b))
report = check_scalar_fn(fn, w, tolerance=1e-3, n_coords=1)
print(f"gradient check on w: max rel err {report['max_rel_err']:.2e} "
      f"(passed={report['passed']})")

# The allocator keeps a high-water mark so benchmarks can report peak memory.
ad.memory.reset_peak()
big = Tensor(np.zeros((256, 256), dtype=np.float32))
_ = big + big
print(f"peak tracked bytes after a 256x256 add: {ad.memory.peak}")
