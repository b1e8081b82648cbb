"""Shortest-path kernel: histograms, normalised similarity and a Gram matrix."""

import numpy as np

from scenegraph_vpr import parse_description, sp_profile, sp_similarity
from scenegraph_vpr.kernel import sp_gram

chain = parse_description("A tree is next to a wall. The wall is next to a gate. The gate is next to a bench.")
star = parse_description("A tree is next to a wall. A gate is next to the wall. A bench is next to the wall.")
pair = parse_description("A tree is next to a wall.")

for name, g in (("chain", chain), ("star", star), ("pair", pair)):
    print(f"{name:<6} {sp_profile(g).histogram}")

print("chain vs star", round(sp_similarity(chain, star), 4))
print("chain vs pair", round(sp_similarity(chain, pair), 4))

K = sp_gram([sp_profile(g) for g in (chain, star, pair)], normalize=True)
print(np.round(K, 4))
print("min eigenvalue", np.linalg.eigvalsh(K).min())
