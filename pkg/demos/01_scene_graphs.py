"""Scene graphs from text: parsing, validation, canonical form and statistics.

Run with ``python demos/01_scene_graphs.py``.
"""

import json

from scenegraph_vpr import canonical_serialize, graph_stats, parse_description, parse_scene_graph
from scenegraph_vpr.errors import IntegrityError

# A street-level description goes through the small grammar parser.
text = ("A tall brick building is to the left of a narrow white house. "
        "The narrow white house is next to a green hedge. A red post box is in front of the green hedge.")
g = parse_description(text)
for n in g.nodes:
    print(f"{n.id}: {n.label:<10} {', '.join(n.attributes)}")
for e in g.edges:
    print(f"{e.source} --{e.relation}--> {e.target}")

# The canonical serialization is what every later stage hashes and compares.
print(canonical_serialize(g))

# Shape statistics feed the fusion-weight policies later on.
s = graph_stats(g)
print(f"nodes={s.node_count} avg_degree={s.avg_degree:.3f} density={s.density:.3f} "
      f"avg_shortest_path={s.avg_shortest_path:.3f}")

# Documents from an external captioner are validated on the way in.
bad = {"nodes": [{"id": "a", "label": "tree", "attributes": []}],
       "edges": [{"source": "a", "target": "zz", "relation": "behind"}]}
try:
    parse_scene_graph(json.dumps(bad))
except IntegrityError as exc:
    print("rejected:", exc)
