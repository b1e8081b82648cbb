import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from scenegraph_vpr.describe import (
    DESCRIBE_IMAGE,
    PARSE_DESCRIPTION,
    Lexicon,
    PromptTemplate,
    ServiceClient,
    ServiceRequest,
    ServiceResponse,
    call_service,
    extract_scene_graph,
    graph_from_response,
    parse_description,
    parse_sentences,
    render_prompt,
)
from scenegraph_vpr.errors import (
    AuthError,
    CacheMiss,
    GrammarError,
    MissingPlaceholder,
    NetworkError,
    SchemaError,
    UnknownRelation,
)
from scenegraph_vpr.graph import canonical_serialize

GRAPH_REPLY = json.dumps({
    "nodes": [{"id": "n0", "label": "building", "attributes": ["tall"]},
              {"id": "n1", "label": "tree", "attributes": []}],
    "edges": [{"source": "n0", "target": "n1", "relation": "left of"}],
})


class _StubHandler(BaseHTTPRequestHandler):
    calls = 0

    def do_POST(self):
        type(self).calls += 1
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if self.headers.get("Authorization") != "Bearer good-key":
            self.send_response(401)
            self.end_headers()
            return
        if "Convert the scene description" in body["prompt"]:
            text = GRAPH_REPLY
        else:
            text = f"a tall building to the left of a tree ({body['model']})"
        data = json.dumps({"text": text}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    _StubHandler.calls = 0
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/v1/generate"
    server.shutdown()
    server.server_close()


class CountingTransport:
    def __init__(self, reply="ok"):
        self.reply = reply
        self.calls = 0
        self.lock = threading.Lock()

    def __call__(self, endpoint, key, payload):
        with self.lock:
            self.calls += 1
        return self.reply


class TestPrompts:
    def test_placeholder_free_template_verbatim(self):
        t = PromptTemplate("plain", "Describe the scene.", "describe_image")
        assert render_prompt(t, {}) == "Describe the scene."

    def test_missing_placeholder(self):
        with pytest.raises(MissingPlaceholder):
            render_prompt(PARSE_DESCRIPTION, {})

    def test_describe_prompt_excludes_transient_content(self):
        text = render_prompt(DESCRIBE_IMAGE, {"frame_id": "seq1/0004"})
        assert "seq1/0004" in text
        assert "people, vehicles" in text
        assert "lighting conditions" in text

    def test_placeholders(self):
        assert PARSE_DESCRIPTION.placeholders == {"description"}
        assert DESCRIBE_IMAGE.placeholders == {"frame_id"}


class TestServiceClient:
    def test_content_hash_covers_prompt_model_and_image(self):
        a = ServiceRequest("p", "m", b"img")
        assert a.content_hash == ServiceRequest("p", "m", b"img").content_hash
        assert a.content_hash != ServiceRequest("p", "m", b"img2").content_hash
        assert a.content_hash != ServiceRequest("p", "m2", b"img").content_hash

    def test_replay_empty_cache(self, tmp_path):
        client = ServiceClient("http://unused", "k", tmp_path, transport=CountingTransport())
        with pytest.raises(CacheMiss):
            client.call(ServiceRequest("p", "m"), "replay")

    def test_replay_hit_makes_no_call(self, tmp_path):
        transport = CountingTransport()
        client = ServiceClient("http://unused", "k", tmp_path, transport=transport)
        req = ServiceRequest("describe", "m")
        client.write_cache(req, ServiceResponse("cached text", req.content_hash, "2024-01-01T00:00:00+00:00"))
        assert client.call(req, "replay").text == "cached text"
        assert transport.calls == 0

    def test_record_then_replay_stub_server(self, tmp_path, stub_server):
        client = ServiceClient(stub_server, "good-key", tmp_path)
        req = ServiceRequest("describe frame 1", "vlm-a", b"\x89PNG")
        recorded = client.call(req, "record")
        assert _StubHandler.calls == 1
        replayed = client.call(req, "replay")
        assert _StubHandler.calls == 1
        assert replayed == recorded
        cached = (tmp_path / f"{req.content_hash}.json").read_bytes()
        client.call(req, "record")
        # a second recording rewrites the entry atomically; no temp files linger
        assert sorted(p.name for p in tmp_path.iterdir()) == [f"{req.content_hash}.json"]
        assert json.loads(cached)["request"]["image_sha256"] == req.image_sha256

    def test_bad_credentials(self, tmp_path, stub_server):
        client = ServiceClient(stub_server, "wrong", tmp_path)
        with pytest.raises(AuthError):
            client.call(ServiceRequest("p", "m"), "live")

    def test_unreachable_endpoint(self):
        client = ServiceClient("http://127.0.0.1:9/none", "k")
        with pytest.raises(NetworkError):
            client.call(ServiceRequest("p", "m"), "live")

    def test_missing_configuration(self, monkeypatch):
        monkeypatch.delenv("T2G_SERVICE_ENDPOINT", raising=False)
        monkeypatch.delenv("T2G_SERVICE_KEY", raising=False)
        with pytest.raises(NetworkError):
            ServiceClient().call(ServiceRequest("p", "m"), "live")
        with pytest.raises(AuthError):
            ServiceClient(endpoint="http://x").call(ServiceRequest("p", "m"), "live")

    def test_environment_configuration(self, monkeypatch, tmp_path):
        monkeypatch.setenv("T2G_SERVICE_ENDPOINT", "http://env")
        monkeypatch.setenv("T2G_SERVICE_KEY", "env-key")
        monkeypatch.setenv("T2G_CACHE_DIR", str(tmp_path))
        c = ServiceClient()
        assert (c.endpoint, c.key, c.cache_dir) == ("http://env", "env-key", tmp_path)

    def test_call_many_keeps_order(self, tmp_path):
        transport = CountingTransport()
        client = ServiceClient("http://x", "k", tmp_path, transport=transport, max_parallel=3)
        reqs = [ServiceRequest(f"p{i}", "m") for i in range(12)]
        out = client.call_many(reqs, "record")
        assert [r.content_hash for r in out] == [r.content_hash for r in reqs]
        assert transport.calls == 12
        assert [r.text for r in client.call_many(reqs, "replay")] == ["ok"] * 12
        assert transport.calls == 12

    def test_call_service_helper(self, tmp_path):
        client = ServiceClient("http://x", "k", tmp_path, transport=CountingTransport("hi"))
        assert call_service(ServiceRequest("p", "m"), "live", client).text == "hi"

    def test_extract_scene_graph_replays_offline(self, tmp_path, stub_server):
        live = ServiceClient(stub_server, "good-key", tmp_path)
        desc, g = extract_scene_graph(live, b"img", "f1", mode="record")
        offline = ServiceClient("http://127.0.0.1:9/none", "k", tmp_path)
        desc2, g2 = extract_scene_graph(offline, b"img", "f1", mode="replay")
        assert desc == desc2
        assert canonical_serialize(g) == canonical_serialize(g2)
        assert g.meta == {"frame_id": "f1", "source": "vlm"}

    def test_malformed_graph_response(self, caplog):
        with pytest.raises(SchemaError):
            graph_from_response(ServiceResponse("not json", "ab" * 32, "t"))
        assert "malformed" in caplog.text


class TestGrammar:
    def test_quoted_sentence(self):
        g = parse_description("a tall brick building to the left of a narrow white house")
        assert [(n.label, n.attributes) for n in g.nodes] == [
            ("building", ("tall", "brick")), ("house", ("narrow", "white"))]
        assert [(e.source, e.target, e.relation) for e in g.edges] == [("n0", "n1", "left of")]

    def test_single_mention(self):
        g = parse_description("a tree")
        assert (g.node_count, len(g.edges)) == (1, 0)

    def test_repeated_sentence_deduplicates(self):
        once = parse_description("a tree next to a tree.")
        twice = parse_description("a tree next to a tree. a tree next to a tree.")
        assert canonical_serialize(once) == canonical_serialize(twice)
        assert (once.node_count, len(once.edges)) == (2, 1)

    def test_coreference_across_sentences(self):
        g = parse_description("A red door is beside the old window. The old window is behind a hedge.")
        assert g.node_count == 3
        assert len(g.edges) == 2

    def test_relation_surface_forms(self):
        rels = {parse_description(f"a tree {form} a wall").edges[0].relation
                for form in ("to the left of", "on the left of", "left of")}
        assert rels == {"left of"}
        assert parse_description("the lamp post is close to the bench").edges[0].relation == "close by"

    def test_multiword_nouns(self):
        g = parse_description("a red traffic light next to a street sign")
        assert sorted(n.label for n in g.nodes) == ["street sign", "traffic light"]

    def test_unknown_relation(self):
        with pytest.raises(UnknownRelation):
            parse_description("a tree beneath a house")

    def test_unknown_noun(self):
        with pytest.raises(GrammarError):
            parse_description("a tall zeppelin")

    def test_strict_rejects_unknown_attribute(self):
        with pytest.raises(GrammarError):
            parse_description("a sparkly tree", strict=True)
        assert parse_description("a sparkly tree").nodes[0].attributes == ("sparkly",)

    def test_lexicon_extension(self, tmp_path):
        path = tmp_path / "lex.tsv"
        path.write_text("zeppelin\tnoun\nbeneath\trelation\tbelow\nsparkly\tattribute\n")
        lex = Lexicon.load(path)
        g = parse_description("a sparkly zeppelin beneath a tree", lex, strict=True)
        assert {n.label for n in g.nodes} == {"zeppelin", "tree"}
        assert g.edges[0].relation == "below"
        assert Lexicon.from_lines(lex.to_lines()) == lex

    def test_lexicon_bad_line(self):
        with pytest.raises(SchemaError):
            Lexicon.from_lines(["tree noun"])

    def test_ast(self):
        (s,) = parse_sentences("The tall building is behind the tree")
        assert (s.subject.label, s.subject.attributes, s.relation, s.object.label) == (
            "building", ("tall",), "behind", "tree")

    def test_pure(self):
        text = "a white house next to a tall tree. the tall tree is behind a wall."
        assert canonical_serialize(parse_description(text)) == canonical_serialize(parse_description(text))
