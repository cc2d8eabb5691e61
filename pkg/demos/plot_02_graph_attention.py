"""
Masked graph attention
======================

A three-node line graph: node 0 never sees node 2, whatever node 2 does.
"""
import torch

from tfdpm.gat import GatLayer

adj = torch.tensor([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=torch.bool)
layer = GatLayer(4, adjacency=adj)
h = torch.randn(1, 3, 4)

print(layer.attention_weights(h)[0].detach())

h2 = h.clone()
h2[0, 2] += 10.0
print("node 0 unchanged:", torch.equal(layer(h)[0, 0], layer(h2)[0, 0]))
print("node 1 changed:  ", not torch.equal(layer(h)[0, 1], layer(h2)[0, 1]))
