"""Uniform access to embedding, text-chat and vision-chat models.

Every model call in the package goes through :class:`Gateway`, which renders
prompt templates, retries transient failures, bounds in-flight requests,
caches embeddings and writes an NDJSON transcript. Backends are swappable:
:class:`HTTPBackend` talks to an OpenAI-compatible inference server,
:class:`MockBackend` is deterministic and scriptable for tests and demos.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np

from .errors import GatewayError, InputError, TemplateError, ValidationError

log = logging.getLogger(__name__)

PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


class TransientError(Exception):
    """Raised by backends for failures worth retrying (timeouts, 5xx, 429)."""


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    max_tokens: int = 2048


@dataclass
class ModelEndpoint:
    base_url: str
    model_name: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout_s: float = 120.0
    max_retries: int = 2

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValidationError("timeout_s must be positive")
        if self.max_retries < 0:
            raise ValidationError("max_retries must be >= 0")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> ModelEndpoint:
        return cls(**{k: raw[k] for k in ("base_url", "model_name", "api_key_env", "timeout_s", "max_retries") if k in raw})


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str

    @property
    def required_bindings(self) -> frozenset[str]:
        return frozenset(PLACEHOLDER.findall(self.body))

    def render(self, bindings: Mapping[str, Any]) -> str:
        missing = sorted(self.required_bindings - set(bindings))
        if missing:
            raise TemplateError(self.template_id, missing)
        # single pass: values are never re-scanned for placeholders
        return PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), self.body)


def load_templates() -> dict[str, PromptTemplate]:
    out = {}
    for entry in resources.files("mmkg.prompts").iterdir():
        if entry.name.endswith(".txt"):
            tid = entry.name[:-4]
            out[tid] = PromptTemplate(tid, entry.read_text(encoding="utf-8"))
    return out


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def file_digest(path: str | os.PathLike) -> str:
    return sha256_hex(Path(path).read_bytes())


def bindings_digest(bindings: Mapping[str, Any]) -> str:
    return sha256_hex(json.dumps({k: str(v) for k, v in bindings.items()}, sort_keys=True))


class Backend(Protocol):
    embedding_model: str

    def complete(
        self,
        prompt: str,
        images: Sequence[Path],
        params: DecodingParams,
        *,
        template_id: str,
        bindings: Mapping[str, Any],
    ) -> str: ...

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


# -- HTTP ----------------------------------------------------------------------


class HTTPBackend:
    """OpenAI-compatible ``/chat/completions`` and ``/embeddings`` client."""

    def __init__(
        self,
        llm: ModelEndpoint,
        embedding: ModelEndpoint,
        mllm: ModelEndpoint | None = None,
        transport=None,
    ):
        import httpx

        self._httpx = httpx
        self.llm = llm
        self.mllm = mllm or llm
        self.embedding = embedding
        self.embedding_model = embedding.model_name
        self._client = httpx.Client(transport=transport)

    def _post(self, endpoint: ModelEndpoint, path: str, payload: dict) -> dict:
        httpx = self._httpx
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(endpoint.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        url = endpoint.base_url.rstrip("/") + path
        try:
            resp = self._client.post(url, json=payload, headers=headers, timeout=endpoint.timeout_s)
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            raise TransientError(f"{url}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"{url}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise GatewayError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}", attempts=1)
        return resp.json()

    def complete(self, prompt, images, params, *, template_id, bindings) -> str:
        endpoint = self.mllm if images else self.llm
        content: Any = prompt
        if images:
            content = [{"type": "text", "text": prompt}]
            for img in images:
                mime = mimetypes.guess_type(str(img))[0] or "image/png"
                data = base64.b64encode(Path(img).read_bytes()).decode("ascii")
                content.append({"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}})
        payload = {
            "model": endpoint.model_name,
            "messages": [{"role": "user", "content": content}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        body = self._post(endpoint, "/chat/completions", payload)
        try:
            return body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransientError(f"malformed completion response: {exc}") from exc

    def embed(self, texts):
        body = self._post(self.embedding, "/embeddings", {"model": self.embedding.model_name, "input": list(texts)})
        rows = sorted(body["data"], key=lambda d: d.get("index", 0))
        return [row["embedding"] for row in rows]


# -- mock ----------------------------------------------------------------------

_STOPWORDS = frozenset(
    "a an the of and or in on at to is are was were be by for with as it its this that from".split()
)


@dataclass
class MockRule:
    reply: str
    template_id: str | None = None
    match: dict[str, str] = field(default_factory=dict)
    images: list[str] | None = None  # basenames, order-sensitive
    prompt_sha256: str | None = None

    def matches(self, template_id: str, bindings: Mapping[str, Any], prompt: str, images: Sequence[Path]) -> bool:
        if self.prompt_sha256 is not None:
            return sha256_hex(prompt) == self.prompt_sha256
        if self.template_id is not None and self.template_id != template_id:
            return False
        for key, needle in self.match.items():
            if needle not in str(bindings.get(key, "")):
                return False
        if self.images is not None and [Path(p).name for p in images] != list(self.images):
            return False
        return True


class MockBackend:
    """Deterministic backend.

    Chat replies come from scripted rules (first match wins); unscripted calls
    get a reply derived from the prompt hash and image digests. Embeddings are
    a seeded hashed bag of words, so texts sharing words are cosine-similar.
    """

    def __init__(self, seed: int = 0, rules: Sequence[MockRule] = (), dim: int = 64):
        self.seed = int(seed)
        self.rules = list(rules)
        self.dim = dim
        self.embedding_model = f"mock-bow-{dim}-{self.seed}"

    @classmethod
    def from_fixture(cls, fixture: Mapping[str, Any] | str | os.PathLike, seed: int = 0) -> MockBackend:
        if not isinstance(fixture, Mapping):
            fixture = json.loads(Path(fixture).read_text(encoding="utf-8"))
        rules = [MockRule(**r) for r in fixture.get("rules", [])]
        return cls(seed=seed, rules=rules, dim=int(fixture.get("dim", 64)))

    def complete(self, prompt, images, params, *, template_id, bindings) -> str:
        for rule in self.rules:
            if rule.matches(template_id, bindings, prompt, images):
                return rule.reply
        parts = [prompt] + [file_digest(p) for p in images]
        return f"[mock {template_id} {sha256_hex(chr(0).join(parts) + str(self.seed))[:16]}]"

    def _vector(self, key: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}\x00{key}".encode("utf-8"), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.standard_normal(self.dim)

    def embed(self, texts):
        out = []
        for text in texts:
            tokens = [t for t in re.findall(r"[a-z0-9]+", text.lower()) if t not in _STOPWORDS]
            vec = 0.05 * self._vector("\x01" + text)
            for tok in tokens:
                vec = vec + self._vector(tok)
            out.append((vec / np.linalg.norm(vec)).tolist())
        return out


# -- cache ---------------------------------------------------------------------


class EmbeddingCache:
    """Content-addressed embedding store, optionally backed by an append-only file."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path else None
        self._data: dict[str, list[float]] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    row = json.loads(line)
                    self._data[row["key"]] = row["vector"]

    @staticmethod
    def key(model: str, text: str) -> str:
        return sha256_hex(f"{model}\x00{text}")

    def get(self, model: str, text: str) -> list[float] | None:
        return self._data.get(self.key(model, text))

    def put(self, model: str, text: str, vector: list[float]) -> None:
        k = self.key(model, text)
        with self._lock:
            if k in self._data:
                return
            self._data[k] = vector
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": k, "vector": vector}) + "\n")


# -- gateway -------------------------------------------------------------------


@dataclass
class CallRecord:
    kind: str
    template_id: str
    bindings_digest: str
    reply_digest: str
    latency_ms: float
    attempts: int
    images: list[str] = field(default_factory=list)
    ok: bool = True


class Gateway:
    def __init__(
        self,
        backend: Backend,
        templates: Mapping[str, PromptTemplate] | None = None,
        *,
        cache: EmbeddingCache | None = None,
        transcript_path: str | os.PathLike | None = None,
        max_in_flight: int = 4,
        max_retries: int = 2,
        retry_backoff_s: float = 0.5,
        params: DecodingParams = DecodingParams(),
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.templates = dict(templates) if templates is not None else load_templates()
        self.cache = cache or EmbeddingCache()
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self.max_retries = max_retries
        self.retry_backoff_s = retry_backoff_s
        self.params = params
        self.calls: list[CallRecord] = []
        self._sleep = sleep
        self._sem = threading.BoundedSemaphore(max_in_flight)
        self._log_lock = threading.Lock()

    def template(self, template_id: str) -> PromptTemplate:
        try:
            return self.templates[template_id]
        except KeyError:
            raise TemplateError(template_id, reason="unknown template") from None

    def render(self, template_id: str, bindings: Mapping[str, Any]) -> str:
        return self.template(template_id).render(bindings)

    def _record(self, rec: CallRecord) -> None:
        with self._log_lock:
            self.calls.append(rec)
            if self.transcript_path:
                self.transcript_path.parent.mkdir(parents=True, exist_ok=True)
                with self.transcript_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(asdict(rec)) + "\n")

    def _with_retries(self, fn: Callable[[], Any], describe: str) -> tuple[Any, int]:
        attempt = 0
        while True:
            attempt += 1
            try:
                with self._sem:
                    return fn(), attempt
            except (TransientError, TimeoutError, ConnectionError) as exc:
                if attempt > self.max_retries:
                    raise GatewayError(f"{describe}: {exc}", attempts=attempt) from exc
                log.warning("%s failed on attempt %d: %s; retrying", describe, attempt, exc)
                self._sleep(self.retry_backoff_s * 2 ** (attempt - 1))
            except GatewayError as exc:
                exc.attempts = attempt
                raise

    def _complete(self, kind: str, template_id: str, bindings: Mapping[str, Any], images: list[Path], params) -> str:
        prompt = self.render(template_id, bindings)
        params = params or self.params
        start = time.perf_counter()
        digest = bindings_digest(bindings)
        try:
            reply, attempts = self._with_retries(
                lambda: self.backend.complete(prompt, images, params, template_id=template_id, bindings=bindings),
                f"{kind} {template_id}",
            )
        except GatewayError as exc:
            self._record(CallRecord(kind, template_id, digest, "", _ms(start), exc.attempts, [p.name for p in images], False))
            raise
        self._record(CallRecord(kind, template_id, digest, sha256_hex(reply), _ms(start), attempts, [p.name for p in images]))
        return reply

    def chat(self, template_id: str, bindings: Mapping[str, Any], params: DecodingParams | None = None) -> str:
        return self._complete("chat", template_id, bindings, [], params)

    def vision_chat(
        self,
        template_id: str,
        bindings: Mapping[str, Any],
        images: Sequence[str | os.PathLike],
        params: DecodingParams | None = None,
    ) -> str:
        if not images:
            raise InputError("vision_chat requires at least one image")
        paths = [Path(p) for p in images]
        for p in paths:
            if not p.is_file() or not os.access(p, os.R_OK):
                raise InputError(f"image is not readable: {p}")
        self.template(template_id).render(bindings)  # fail on bindings before touching the network
        return self._complete("vision", template_id, bindings, paths, params)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        if not texts:
            raise InputError("embed requires at least one text")
        if any(not t for t in texts):
            raise InputError("embed texts must be nonempty")
        model = self.backend.embedding_model
        missing = list(dict.fromkeys(t for t in texts if self.cache.get(model, t) is None))
        if missing:
            start = time.perf_counter()
            vectors, attempts = self._with_retries(lambda: self.backend.embed(missing), "embed")
            if len(vectors) != len(missing):
                raise GatewayError("embedding backend returned the wrong number of vectors", attempts)
            for text, vec in zip(missing, vectors):
                arr = np.asarray(vec, dtype=float)
                if not np.all(np.isfinite(arr)):
                    raise GatewayError("embedding backend returned non-finite values", attempts)
                self.cache.put(model, text, arr.tolist())
            self._record(CallRecord("embed", "", sha256_hex("\x00".join(missing)), "", _ms(start), attempts))
        out = np.array([self.cache.get(model, t) for t in texts], dtype=float)
        return out


def _ms(start: float) -> float:
    return round((time.perf_counter() - start) * 1000.0, 3)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))
