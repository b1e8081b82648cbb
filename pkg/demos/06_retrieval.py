"""Building a place index and ranking places with fused scores."""

from scenegraph_vpr import (
    ConstantAlpha,
    Encoder,
    GatConfig,
    HashedEmbedder,
    ThresholdRules,
    generate_synthetic_fixture,
    init_params,
    parse_description,
    query,
)
from scenegraph_vpr.pipeline import index_from_manifest
from scenegraph_vpr.retrieval import LogisticAlpha

fx = generate_synthetic_fixture(seed=3, n_places=10)
gat = GatConfig(hidden_dim=64, output_dim=64, in_dim=256)
encoder = Encoder(init_params(gat), gat, HashedEmbedder(256))
index = index_from_manifest(fx.index_manifest, encoder)
print(len(index), "places indexed")

scene = fx.scenes[4]
o = scene.objects
text = f"a {' '.join(o[0].attributes)} {o[0].label} next to a {' '.join(o[1].attributes)} {o[1].label}"
print("query:", text, " (from", scene.place_id + ")")
g = parse_description(text)

for policy in (ConstantAlpha(0.8), ConstantAlpha(0.0), ThresholdRules(), LogisticAlpha()):
    hits = query(g, index, 3, policy, encoder)
    print(type(policy).__name__)
    for h in hits:
        print(f"   {h.place_id:<9} score {h.score:.3f} = {h.alpha:.2f}*{h.sem:.3f} + {1 - h.alpha:.2f}*{h.struct:.3f}")
