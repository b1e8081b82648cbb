"""Scene descriptions to scene graphs.

Two routes produce graphs from text:

* an external vision-language / LLM service, reached through
  :class:`ServiceClient` with prompt templates and a content-addressed
  replay cache so that pipelines can be re-run offline;
* :func:`parse_description`, a deterministic parser for a constrained
  grammar (``article? attribute* noun (relation article? attribute* noun)?``),
  used offline and for human-written zero-shot queries.
"""

from __future__ import annotations

import base64
import datetime as _dt
import hashlib
import json
import logging
import os
import string
import tempfile
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Literal, Mapping, Sequence

from .errors import (
    AuthError,
    CacheMiss,
    GrammarError,
    MissingPlaceholder,
    NetworkError,
    SchemaError,
    UnknownRelation,
)
from .graph import SceneEdge, SceneGraph, SceneNode, normalize_text, parse_scene_graph

log = logging.getLogger(__name__)

ENV_ENDPOINT = "T2G_SERVICE_ENDPOINT"
ENV_KEY = "T2G_SERVICE_KEY"
ENV_CACHE_DIR = "T2G_CACHE_DIR"


# --------------------------------------------------------------------------
# prompt templates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    stage: Literal["describe_image", "parse_description"]
    version: str = "1"

    def __post_init__(self):
        if not self.body.strip():
            raise ValueError(f"template {self.name!r} has an empty body")

    @property
    def placeholders(self) -> set[str]:
        names = set()
        for _, named, braced, _ in string.Template.pattern.findall(self.body):
            if named or braced:
                names.add(named or braced)
        return names


def render_prompt(t: PromptTemplate, ctx: Mapping[str, object] | None = None) -> str:
    """Substitute ``$name`` / ``${name}`` placeholders; ``$$`` is a literal dollar."""
    try:
        return string.Template(t.body).substitute(dict(ctx or {}))
    except KeyError as exc:
        raise MissingPlaceholder(f"template {t.name!r} needs a value for {exc.args[0]!r}") from None
    except ValueError as exc:
        raise MissingPlaceholder(f"template {t.name!r}: {exc}") from None


DESCRIBE_IMAGE = PromptTemplate(
    name="describe_image",
    stage="describe_image",
    body="""\
You are describing a street-level photograph (frame ${frame_id}) so that the
place can be recognised again later, in any season, weather or time of day.

Describe only scene elements that stay the same over time:
- visible text or signage, such as street names and business names;
- architecture: building types, materials, colours, shapes, windows, roofs;
- the layout of the place, such as intersections, junctions or a straight road;
- infrastructure such as traffic lights, lamp posts, poles and bus stops;
- trees, hedges and other vegetation.

Leave out anything transient: exclude people, vehicles, lighting conditions and
weather (sun, rain, snow, shadows, night).

State where objects are relative to one another, for example
"a tall brick building to the left of a narrow white house".
Write short declarative sentences, one relation per sentence.
""",
)

PARSE_DESCRIPTION = PromptTemplate(
    name="parse_description",
    stage="parse_description",
    body="""\
Convert the scene description below into a scene graph.

Rules:
- Create one node per static object (for example building, text, tree,
  traffic light). Use a short lowercase noun as the label.
- Put non-spatial properties of the object (colour, material, style, shape,
  visible text) in its "attributes" list.
- Create one directed edge per spatial relation between two objects, with the
  relation as a short phrase: left of, right of, in front of, behind, next to,
  close by, on top of, beside.
- Omit transient or irrelevant things: cars, people, animals, lighting,
  weather and seasonal indicators.
- Answer with JSON only, using exactly this schema:
  {"nodes": [{"id": "n0", "label": "...", "attributes": ["..."]}],
   "edges": [{"source": "n0", "target": "n1", "relation": "..."}]}

Description:
${description}
""",
)

TEMPLATES = {t.name: t for t in (DESCRIBE_IMAGE, PARSE_DESCRIPTION)}


# --------------------------------------------------------------------------
# service client with replay cache
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ServiceRequest:
    prompt: str
    model: str
    image: bytes | None = None

    @property
    def image_sha256(self) -> str | None:
        return hashlib.sha256(self.image).hexdigest() if self.image is not None else None

    def canonical(self) -> dict:
        return {"image_sha256": self.image_sha256, "model": self.model, "prompt": self.prompt}

    @property
    def content_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ServiceResponse:
    text: str
    content_hash: str
    timestamp: str

    def to_json(self) -> dict:
        return {"text": self.text, "content_hash": self.content_hash, "timestamp": self.timestamp}


Transport = Callable[[str, str, dict], str]


def http_transport(endpoint: str, key: str, payload: dict, timeout: float = 60.0) -> str:
    """POST ``payload`` as JSON; the reply is JSON with a "text" field, or plain text."""
    req = urllib.request.Request(
        endpoint,
        data=json.dumps(payload).encode("utf-8"),
        headers={"Content-Type": "application/json", "Authorization": f"Bearer {key}"},
        method="POST",
    )
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            body = resp.read().decode("utf-8")
    except urllib.error.HTTPError as exc:
        if exc.code in (401, 403):
            raise AuthError(f"service rejected credentials (HTTP {exc.code})") from None
        raise NetworkError(f"service returned HTTP {exc.code}") from None
    except (urllib.error.URLError, OSError) as exc:
        raise NetworkError(f"cannot reach {endpoint}: {exc}") from None
    try:
        doc = json.loads(body)
    except json.JSONDecodeError:
        return body
    if isinstance(doc, dict) and isinstance(doc.get("text"), str):
        return doc["text"]
    return body


class ServiceClient:
    """Client for the external description/parsing service.

    Modes: ``live`` calls the service, ``record`` calls it and stores the
    response, ``replay`` only reads the cache and never touches the network.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        key: str | None = None,
        cache_dir=None,
        transport: Transport | None = None,
        max_parallel: int = 4,
    ):
        self.endpoint = endpoint if endpoint is not None else os.environ.get(ENV_ENDPOINT)
        self.key = key if key is not None else os.environ.get(ENV_KEY)
        cache_dir = cache_dir if cache_dir is not None else os.environ.get(ENV_CACHE_DIR)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.transport = transport or http_transport
        self.max_parallel = max(1, int(max_parallel))

    def cache_path(self, content_hash: str) -> Path:
        if self.cache_dir is None:
            raise CacheMiss("no cache directory configured")
        return self.cache_dir / f"{content_hash}.json"

    def read_cache(self, req: ServiceRequest) -> ServiceResponse:
        path = self.cache_path(req.content_hash)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CacheMiss(f"no cached response for request {req.content_hash[:12]}") from None
        return ServiceResponse(**doc["response"])

    def write_cache(self, req: ServiceRequest, resp: ServiceResponse) -> None:
        path = self.cache_path(req.content_hash)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"request": req.canonical(), "response": resp.to_json()}
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, ensure_ascii=False, sort_keys=True)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def _live(self, req: ServiceRequest) -> ServiceResponse:
        if not self.endpoint:
            raise NetworkError(f"no service endpoint configured (set {ENV_ENDPOINT})")
        if not self.key:
            raise AuthError(f"no service credential configured (set {ENV_KEY})")
        payload = {"model": req.model, "prompt": req.prompt}
        if req.image is not None:
            payload["image_b64"] = base64.b64encode(req.image).decode("ascii")
        text = self.transport(self.endpoint, self.key, payload)
        stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        return ServiceResponse(text, req.content_hash, stamp)

    def call(self, req: ServiceRequest, mode: str = "replay") -> ServiceResponse:
        if mode == "replay":
            return self.read_cache(req)
        if mode == "live":
            return self._live(req)
        if mode == "record":
            resp = self._live(req)
            self.write_cache(req, resp)
            return resp
        raise ValueError(f"unknown mode {mode!r}")

    def call_many(self, reqs: Sequence[ServiceRequest], mode: str = "replay") -> list[ServiceResponse]:
        """Run requests with at most ``max_parallel`` in flight; results keep input order."""
        with ThreadPoolExecutor(max_workers=self.max_parallel) as pool:
            return list(pool.map(lambda r: self.call(r, mode), reqs))


def call_service(req: ServiceRequest, mode: str = "replay", client: ServiceClient | None = None) -> ServiceResponse:
    return (client or ServiceClient()).call(req, mode)


def graph_from_response(resp: ServiceResponse) -> SceneGraph:
    """Validate a parse-stage response.  Malformed output is logged and rejected."""
    try:
        g = parse_scene_graph(resp.text)
    except SchemaError:
        log.warning("malformed graph from service (request %s): %.200r", resp.content_hash[:12], resp.text)
        raise
    return SceneGraph(g.nodes, g.edges, {**g.meta, "source": "vlm"})


def extract_scene_graph(
    client: ServiceClient,
    image: bytes,
    frame_id: str,
    model: str = "gpt-4-vision",
    parse_model: str = "gpt-4",
    mode: str = "replay",
) -> tuple[str, SceneGraph]:
    """Image -> description -> scene graph through the service."""
    describe = ServiceRequest(render_prompt(DESCRIBE_IMAGE, {"frame_id": frame_id}), model, image)
    description = client.call(describe, mode).text
    parse = ServiceRequest(render_prompt(PARSE_DESCRIPTION, {"description": description}), parse_model)
    g = graph_from_response(client.call(parse, mode))
    return description, SceneGraph(g.nodes, g.edges, {**g.meta, "frame_id": frame_id})


# --------------------------------------------------------------------------
# constrained-grammar parser
# --------------------------------------------------------------------------

ARTICLES = frozenset({"a", "an", "the"})
COPULAS = frozenset({"is", "are", "stands", "sits", "lies", "appears"})

CANONICAL_RELATIONS = (
    "left of", "right of", "in front of", "behind", "next to", "close by", "on top of", "beside",
)

_RELATION_FORMS = {
    "left of": "left of",
    "to the left of": "left of",
    "on the left of": "left of",
    "right of": "right of",
    "to the right of": "right of",
    "on the right of": "right of",
    "in front of": "in front of",
    "behind": "behind",
    "next to": "next to",
    "close by": "close by",
    "close to": "close by",
    "near": "close by",
    "on top of": "on top of",
    "atop": "on top of",
    "above": "on top of",
    "beside": "beside",
    "alongside": "beside",
}

_NOUNS = (
    "arch", "archway", "awning", "bakery", "balcony", "bank", "banner", "bench",
    "bicycle rack", "billboard", "bollard", "bridge", "building", "bus shelter",
    "bus stop", "bush", "cafe", "canal", "chimney", "church", "clock", "column",
    "crosswalk", "dome", "door", "fence", "flag", "flagpole", "fountain", "gallery",
    "garden", "gate", "hedge", "hotel", "house", "hydrant", "intersection", "kiosk",
    "lamp", "lamp post", "lawn", "library", "mailbox", "market", "monument", "mural",
    "museum", "park", "parking meter", "pharmacy", "pillar", "plaque", "planter",
    "pole", "post box", "pub", "railing", "restaurant", "road", "roof", "roundabout",
    "scaffolding", "school", "sculpture", "shop", "sidewalk", "sign", "signpost",
    "spire", "square", "staircase", "station", "statue", "steeple", "store", "street",
    "street lamp", "street sign", "streetlight", "text", "theatre", "tower",
    "traffic light", "traffic sign", "tree", "wall", "window",
)


@dataclass
class Lexicon:
    """Token classes for the grammar: nouns, attributes and relation surface forms."""

    nouns: set[str] = field(default_factory=set)
    attributes: set[str] = field(default_factory=set)
    relations: dict[str, str] = field(default_factory=dict)

    @classmethod
    def default(cls) -> "Lexicon":
        return cls(set(_NOUNS), set(), dict(_RELATION_FORMS))

    @classmethod
    def from_lines(cls, lines: Iterable[str], base: "Lexicon | None" = None) -> "Lexicon":
        """Parse ``token<TAB>class[<TAB>canonical]`` lines (class: noun/attribute/relation)."""
        lex = Lexicon(set(base.nouns), set(base.attributes), dict(base.relations)) if base else Lexicon()
        for lineno, raw in enumerate(lines, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise SchemaError(f"lexicon line {lineno}: expected token<TAB>class")
            token, kind = normalize_text(parts[0]), parts[1].strip().lower()
            if not token:
                raise SchemaError(f"lexicon line {lineno}: empty token")
            if kind == "noun":
                lex.nouns.add(token)
            elif kind == "attribute":
                lex.attributes.add(token)
            elif kind == "relation":
                canonical = normalize_text(parts[2]) if len(parts) == 3 else token
                lex.relations[token] = canonical
            else:
                raise SchemaError(f"lexicon line {lineno}: unknown class {kind!r}")
        return lex

    @classmethod
    def load(cls, path, extend_default: bool = True) -> "Lexicon":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh, cls.default() if extend_default else None)

    def to_lines(self) -> list[str]:
        out = [f"{n}\tnoun" for n in sorted(self.nouns)]
        out += [f"{a}\tattribute" for a in sorted(self.attributes)]
        out += [f"{r}\trelation\t{c}" for r, c in sorted(self.relations.items())]
        return out


def _split_sentences(text: str) -> list[str]:
    out, buf = [], []
    for ch in text:
        if ch in ".;\n":
            out.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    out.append("".join(buf))
    return [s for s in out if s.strip()]


def _match(tokens: Sequence[str], pos: int, vocab, max_len: int = 5) -> int:
    """Length of the longest multi-token entry of ``vocab`` starting at ``pos`` (0 if none)."""
    for n in range(min(max_len, len(tokens) - pos), 0, -1):
        if " ".join(tokens[pos:pos + n]) in vocab:
            return n
    return 0


@dataclass(frozen=True)
class NounPhrase:
    attributes: tuple[str, ...]
    label: str


@dataclass(frozen=True)
class DescriptionSentence:
    subject: NounPhrase
    relation: str | None = None
    object: NounPhrase | None = None

    def __post_init__(self):
        if (self.relation is None) != (self.object is None):
            raise GrammarError("a relation needs an object and vice versa")


class _Parser:
    def __init__(self, lexicon: Lexicon, strict: bool):
        self.lex = lexicon
        self.strict = strict
        self.noun_len = max((len(n.split()) for n in lexicon.nouns), default=1)
        self.rel_len = max((len(r.split()) for r in lexicon.relations), default=1)

    def noun_phrase(self, tokens: Sequence[str], offset: int) -> NounPhrase:
        toks = list(tokens)
        start = 1 if toks and toks[0] in ARTICLES else 0
        body = toks[start:]
        if not body:
            raise GrammarError("expected a noun phrase", offset + start)
        for i, tok in enumerate(body):
            if tok in ARTICLES or tok in COPULAS:
                raise GrammarError(f"unexpected {tok!r} inside a noun phrase", offset + start + i)
        label_len = 0
        for n in range(min(self.noun_len, len(body)), 0, -1):
            if " ".join(body[-n:]) in self.lex.nouns:
                label_len = n
                break
        if not label_len:
            raise GrammarError(f"{body[-1]!r} is not a known noun", offset + len(toks) - 1)
        label = " ".join(body[-label_len:])
        attrs = []
        i = 0
        head = body[:-label_len]
        while i < len(head):
            n = _match(head, i, self.lex.attributes)
            if n:
                attrs.append(" ".join(head[i:i + n]))
                i += n
                continue
            if self.strict:
                raise GrammarError(f"{head[i]!r} is not a known attribute", offset + start + i)
            attrs.append(head[i])
            i += 1
        return NounPhrase(tuple(dict.fromkeys(attrs)), label)

    def sentence(self, tokens: Sequence[str]) -> DescriptionSentence:
        for pos in range(1, len(tokens)):
            n = _match(tokens, pos, self.lex.relations, self.rel_len)
            if not n:
                continue
            relation = self.lex.relations[" ".join(tokens[pos:pos + n])]
            subj_end = pos - 1 if tokens[pos - 1] in COPULAS else pos
            subject = self.noun_phrase(tokens[:subj_end], 0)
            obj_tokens = tokens[pos + n:]
            if not obj_tokens:
                raise GrammarError(f"relation {relation!r} has no object", pos + n)
            return DescriptionSentence(subject, relation, self.noun_phrase(obj_tokens, pos + n))
        try:
            return DescriptionSentence(self.noun_phrase(tokens, 0))
        except GrammarError:
            self._diagnose_relation(tokens)
            raise

    def _diagnose_relation(self, tokens: Sequence[str]) -> None:
        # "a tree beneath a house": a noun, then words, then an article
        for pos in range(len(tokens)):
            n = _match(tokens, pos, self.lex.nouns, self.noun_len)
            if not n:
                continue
            rest = tokens[pos + n:]
            if rest and any(t in ARTICLES for t in rest):
                k = next(i for i, t in enumerate(rest) if t in ARTICLES)
                words = [t for t in rest[:k] if t not in COPULAS]
                if words:
                    raise UnknownRelation(f"unknown relation {' '.join(words)!r}", pos + n)
            return


def parse_sentences(text: str, lexicon: Lexicon | None = None, strict: bool = False) -> list[DescriptionSentence]:
    parser = _Parser(lexicon or DEFAULT_LEXICON, strict)
    out = []
    for raw in _split_sentences(text):
        tokens = normalize_text(raw).split()
        if tokens:
            out.append(parser.sentence(tokens))
    return out


def parse_description(text: str, lexicon: Lexicon | None = None, strict: bool = False) -> SceneGraph:
    """Parse constrained-grammar sentences into a canonical scene graph.

    Mentions with the same label and attribute set refer to the same node.
    Inside one sentence the object never resolves to the subject's node, so
    "a tree next to a tree" yields two trees.
    """
    nodes: list[tuple[tuple[str, frozenset[str]], NounPhrase]] = []
    edges: dict[tuple[int, int, str], None] = {}

    def resolve(np_: NounPhrase, exclude: int | None = None) -> int:
        key = (np_.label, frozenset(np_.attributes))
        for i, (k, _) in enumerate(nodes):
            if k == key and i != exclude:
                return i
        nodes.append((key, np_))
        return len(nodes) - 1

    for sent in parse_sentences(text, lexicon, strict):
        s = resolve(sent.subject)
        if sent.object is not None:
            o = resolve(sent.object, exclude=s)
            edges[(s, o, sent.relation)] = None

    g = SceneGraph(
        [SceneNode(f"m{i}", np_.label, np_.attributes) for i, (_, np_) in enumerate(nodes)],
        [SceneEdge(f"m{s}", f"m{o}", r) for s, o, r in edges],
        {"source": "grammar"},
    )
    return g.canonical()


DEFAULT_LEXICON = Lexicon.default()
