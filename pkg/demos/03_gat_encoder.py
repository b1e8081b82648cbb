"""The graph attention encoder: a forward pass, attention weights and a gradient check."""

import numpy as np

from scenegraph_vpr import GatConfig, HashedEmbedder, build_features, init_params, parse_description
from scenegraph_vpr.gat import attention_weights, backward, forward

cfg = GatConfig(num_layers=2, heads=2, hidden_dim=16, output_dim=8, in_dim=32)
params = init_params(cfg)
provider = HashedEmbedder(cfg.in_dim)

g = parse_description("A white house is next to a tall tree. The tall tree is behind a stone wall.")
fb = build_features(g, provider)
emb, cache = forward(fb, params, cfg)
print("embedding:", np.round(emb.vector, 3))
print("pooled norm before normalisation:", round(emb.norm, 4))

# Incoming attention of every node sums to one (self loops included).
src, dst, alpha = attention_weights(cache, 0)
for (s, d), a in zip(zip(src, dst), alpha):
    print(f"layer 0  {fb.node_order[s]} -> {fb.node_order[d]}  heads {np.round(a, 3)}")

# Manual backward pass against a central difference for one weight.
R = np.random.default_rng(0).normal(size=cfg.output_dim)
grads = dict(backward(R, cache).named_arrays())
W = params.layers[0]["W"]
# pick an input coordinate that some node actually uses
idx = (1, int(np.argmax(np.abs(fb.node_features).sum(axis=0))), 2)
old = W[idx]
W[idx] = old + 1e-6
up = forward(fb, params, cfg)[0].vector @ R
W[idx] = old - 1e-6
down = forward(fb, params, cfg)[0].vector @ R
W[idx] = old
print("analytic", grads["layers.0.W"][idx], "numeric", (up - down) / 2e-6)
