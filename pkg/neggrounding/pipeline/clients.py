"""Generator / VQA model clients.

Every client takes a ``ClientRequest`` and returns the model's raw text reply.
Transport problems surface as ``ClientError``; parsing the reply is the
caller's job.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import requests

from ..errors import ClientError, SchemaError
from .overlay import image_to_bytes, image_to_data_uri, load_image_ref

logger = logging.getLogger(__name__)

DEFAULT_ENDPOINT_ENV = "NEGGROUNDING_ENDPOINT"
DEFAULT_API_KEY_ENV = "NEGGROUNDING_API_KEY"
DEFAULT_TIMEOUT = 60.0
OLLAMA_GENERATE_URL = "http://localhost:11434/api/generate"


@dataclass(frozen=True)
class ClientRequest:
    kind: str
    prompt: str
    images: tuple[str, ...] = ()
    model: str = ""
    attempt: int = 0

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


class ModelClient(Protocol):
    def complete(self, request: ClientRequest) -> str: ...


def parse_json_reply(text: str) -> dict:
    """Decode a JSON object reply, tolerating a markdown fence around it."""
    body = text.strip()
    if body.startswith("```"):
        body = body.strip("`").strip()
        if body.lower().startswith("json"):
            body = body[4:]
    try:
        payload = json.loads(body)
    except json.JSONDecodeError as e:
        raise SchemaError(f"reply is not JSON: {e}; raw reply: {text[:200]!r}") from e
    if not isinstance(payload, dict):
        raise SchemaError(f"reply is a JSON {type(payload).__name__}, expected an object")
    return payload


def _encoded_images(request: ClientRequest) -> list[str]:
    """Image files become data URIs; other references pass through."""
    encoded = []
    for ref in request.images:
        image = load_image_ref(ref)
        encoded.append(image_to_data_uri(image) if image is not None else ref)
    return encoded


class HttpClient:
    """POSTs ``{model, prompt, images, stream: false}`` and reads ``response``.

    The body matches Ollama's ``/api/generate``; any service answering with
    ``response`` or OpenAI-style ``choices`` works.
    """

    def __init__(self, endpoint: str = OLLAMA_GENERATE_URL, api_key: str | None = None,
                 timeout: float = DEFAULT_TIMEOUT, session: requests.Session | None = None):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()

    @classmethod
    def from_env(cls, endpoint_env: str = DEFAULT_ENDPOINT_ENV, api_key_env: str = DEFAULT_API_KEY_ENV,
                 timeout: float = DEFAULT_TIMEOUT) -> "HttpClient":
        endpoint = os.environ.get(endpoint_env)
        if not endpoint:
            raise ClientError(f"set {endpoint_env} to the model endpoint URL")
        return cls(endpoint=endpoint, api_key=os.environ.get(api_key_env), timeout=timeout)

    def complete(self, request: ClientRequest) -> str:
        payload = {
            "model": request.model,
            "prompt": request.prompt,
            "images": _encoded_images(request),
            "stream": False,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            response = self.session.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
        except requests.RequestException as e:
            raise ClientError(f"request to {self.endpoint} failed: {e}") from e
        if response.status_code != 200:
            raise ClientError(f"{self.endpoint} answered {response.status_code}: {response.text[:200]}")
        try:
            data = response.json()
        except ValueError as e:
            raise ClientError(f"{self.endpoint} returned non-JSON body") from e
        if "response" in data:
            return str(data["response"]).strip()
        try:
            return str(data["choices"][0]["message"]["content"]).strip()
        except (KeyError, IndexError, TypeError):
            raise ClientError(f"{self.endpoint} reply has neither 'response' nor 'choices'") from None


class OllamaClient:
    """Local Ollama server through the ``ollama`` package."""

    def __init__(self, model: str = "qwen2.5vl:3b", temperature: float = 0.0):
        self.model = model
        self.temperature = temperature

    def ensure_model(self) -> None:
        """Fail early if the server is down or no pulled model starts with our name."""
        import ollama

        try:
            listing = ollama.list()
        except Exception as e:
            raise ClientError(f"cannot reach the Ollama server ({e}); start it with 'ollama serve'") from e
        models = listing.get("models", []) if isinstance(listing, dict) else getattr(listing, "models", [])
        names = []
        for m in models:
            name = m.get("name") or m.get("model") if isinstance(m, dict) else getattr(m, "model", None)
            if name:
                names.append(name)
        if not any(name.startswith(self.model) for name in names):
            raise ClientError(f"no Ollama model starts with {self.model!r}; run 'ollama pull {self.model}'")
        logger.info("Ollama model %s is available", self.model)

    def complete(self, request: ClientRequest) -> str:
        import ollama

        images = []
        for ref in request.images:
            image = load_image_ref(ref)
            if image is None:
                raise ClientError(f"Ollama needs image files, got reference {ref!r}")
            images.append(image_to_bytes(image))
        try:
            response = ollama.chat(
                model=request.model or self.model,
                messages=[{"role": "user", "content": request.prompt, "images": images}],
                options={"temperature": self.temperature},
            )
        except Exception as e:
            raise ClientError(f"Ollama inference failed: {e}") from e
        return response["message"]["content"].strip()


class LlamaCppClient:
    """GGUF vision model loaded in-process with llama-cpp-python (extra ``local``)."""

    def __init__(self, model_path: str | Path, clip_model_path: str | Path, n_ctx: int = 4096,
                 n_threads: int = 8, max_tokens: int = 2048):
        try:
            from llama_cpp import Llama
            from llama_cpp.llama_chat_format import Llava15ChatHandler
        except ImportError as e:
            raise ClientError("llama-cpp-python is not installed; install the 'local' extra") from e
        for path in (model_path, clip_model_path):
            if not Path(path).is_file():
                raise ClientError(f"model file not found: {path}")
        self.max_tokens = max_tokens
        self._lock = threading.Lock()
        self.llm = Llama(
            model_path=str(model_path),
            chat_handler=Llava15ChatHandler(clip_model_path=str(clip_model_path)),
            n_ctx=n_ctx,
            n_threads=n_threads,
            n_gpu_layers=0,
            verbose=False,
        )

    def complete(self, request: ClientRequest) -> str:
        content = [{"type": "image_url", "image_url": {"url": uri}} for uri in _encoded_images(request)]
        content.append({"type": "text", "text": request.prompt})
        # one model instance; llama.cpp contexts are not re-entrant
        with self._lock:
            try:
                response = self.llm.create_chat_completion(
                    messages=[{"role": "user", "content": content}],
                    max_tokens=self.max_tokens,
                    temperature=0.0,
                )
            except Exception as e:
                raise ClientError(f"llama.cpp inference failed: {e}") from e
        return response["choices"][0]["message"]["content"].strip()


@dataclass
class _Rule:
    kind: str
    match: str
    responses: list[str]

    def answer(self, request: ClientRequest) -> str:
        return self.responses[min(request.attempt, len(self.responses) - 1)]


@dataclass
class MockClient:
    """Deterministic client backed by a fixtures directory.

    Lookup order: ``<request digest>.txt`` in the directory, then the first
    rule in ``responses.jsonl`` whose ``kind`` equals the request kind (or is
    ``*``) and whose ``match`` substring occurs in the prompt. A rule may list
    several ``responses``; attempt ``i`` of a request gets entry ``i`` (the
    last one repeats).
    """

    fixtures: Path | None = None
    rules: list[_Rule] = field(default_factory=list)
    calls: list[ClientRequest] = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()
        if self.fixtures is not None:
            self.fixtures = Path(self.fixtures)
            rules_file = self.fixtures / "responses.jsonl"
            if rules_file.is_file():
                self.rules.extend(self._read_rules(rules_file))

    @staticmethod
    def _read_rules(path: Path) -> list[_Rule]:
        rules = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                responses = entry.get("responses") or [entry["response"]]
                rules.append(_Rule(kind=entry.get("kind", "*"), match=entry.get("match", ""),
                                   responses=[r if isinstance(r, str) else json.dumps(r) for r in responses]))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ClientError(f"{path}:{lineno}: bad mock rule: {e}") from e
        return rules

    def add_rule(self, kind: str, match: str, *responses) -> None:
        self.rules.append(_Rule(kind, match, [r if isinstance(r, str) else json.dumps(r) for r in responses]))

    def complete(self, request: ClientRequest) -> str:
        with self._lock:
            self.calls.append(request)
        if self.fixtures is not None:
            canned = self.fixtures / f"{request.digest}.txt"
            if canned.is_file():
                return canned.read_text(encoding="utf-8").strip()
        for rule in self.rules:
            if rule.kind in ("*", request.kind) and rule.match in request.prompt:
                return rule.answer(request)
        raise ClientError(f"mock has no response for {request.kind} request {request.digest[:12]}")

    def count(self, kind: str | None = None) -> int:
        with self._lock:
            return sum(1 for c in self.calls if kind is None or c.kind == kind)


class BoundedClient:
    """Caps the number of requests in flight against the wrapped client."""

    def __init__(self, inner: ModelClient, limit: int = 8):
        if limit < 1:
            raise ValueError("in-flight limit must be at least 1")
        self.inner = inner
        self._slots = threading.BoundedSemaphore(limit)

    def complete(self, request: ClientRequest) -> str:
        with self._slots:
            return self.inner.complete(request)
