"""
Attention from scratch, checked by finite differences
=====================================================
"""

import torch

from fgl.nn import grad_check, scaled_dot_attention

torch.manual_seed(0)
q, k, v = (torch.randn(4, 8, dtype=torch.float64) for _ in range(3))

# weights are a row-stochastic matrix
out, w = scaled_dot_attention(q, k, v, return_weights=True)
print("row sums", w.sum(-1))

# with one key every query gets that key's value
print(torch.equal(scaled_dot_attention(q, k[:1], v[:1]), v[:1].expand(4, 8)))

# a small attention layer and its gradient audit
layer = torch.nn.MultiheadAttention(8, 2, batch_first=True).double()
x = torch.randn(1, 5, 8, dtype=torch.float64)
rep = grad_check(layer, lambda: layer(x, x, x)[0].pow(2).mean())
print(rep.summary())

# the full FL-Expert and bridge audit (about 40 s):
#   from fgl.experiments import gradient_audit
#   from fgl.domain import ToyConfig
#   for name, r in gradient_audit(ToyConfig()).items(): print(name, r.summary())
