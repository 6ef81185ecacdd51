"""Tour of the tensor engine: building graphs, taking gradients, checking them.

Every training and attack loop in this package runs on this little
reverse-mode engine, so it is worth seeing it in isolation first.
"""

import numpy as np

from advreplay import tensor as T
from advreplay.tensor import Tensor

# tensors are immutable float64 arrays; ops build a fresh graph each call
x = Tensor([[1.0, -2.0], [0.5, 3.0]])
w = Tensor(np.array([[0.2, -0.1], [0.4, 0.7]]))

logits = T.matmul(T.relu(x), w)
probs = T.softmax(logits)
print("softmax rows sum to one:", probs.data.sum(axis=1))

# a scalar output can be differentiated w.r.t. any leaves
loss = T.tmean(T.l2_norm(T.sub(probs, Tensor(np.eye(2))), axis=1))
value, grads = T.value_and_grad(loss, [x, w])
print("loss value:", value)
print("d loss / d x:\n", grads[x].data)

# spot-check one coordinate against central finite differences
step = 1e-5


def loss_at(arr):
    p = T.softmax(T.matmul(T.relu(Tensor(arr)), w))
    out = T.tmean(T.l2_norm(T.sub(p, Tensor(np.eye(2))), axis=1))
    return T.value_and_grad(out, [])[0]


probe = x.data.copy()
probe[0, 0] += step
up = loss_at(probe)
probe[0, 0] -= 2 * step
down = loss_at(probe)
fd = (up - down) / (2 * step)
print(f"autodiff grad[0,0] = {grads[x].data[0, 0]:+.8f}")
print(f"finite difference  = {fd:+.8f}")

# the squared-distance loss used by the attack: d/dx ||x - mu||^2 = 2 (x - mu)
xa = Tensor([1.0, 0.0])
diff = T.sub(xa, Tensor([0.0, 0.0]))
_, g = T.value_and_grad(T.tsum(T.mul(diff, diff)), [xa])
print("attack-loss gradient at (1,0) toward origin:", g[xa].data)
