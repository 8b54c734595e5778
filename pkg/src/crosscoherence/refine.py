"""Caption refinement through a text-completion LLM.

For each shape the existing captions (one per line) are followed by a
request asking for better descriptions; the completion is parsed into
caption lines. Completions are cached as content-addressed JSON files keyed
by the SHA-256 of the rendered prompt.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import httpx

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = (
    "The sentences above all describe the same object. Using all of the information they contain, "
    "write five new descriptions of the object, one per numbered line. Each description should be a "
    "single precise sentence covering its overall shape, its parts, their colors and materials."
)
DEFAULT_KEY_ENV = "CROSSCOHERENCE_LLM_API_KEY"


class RefineError(RuntimeError):
    pass


class ProviderError(RuntimeError):
    pass


def build_refine_prompt(captions: Sequence[str], template: str = DEFAULT_TEMPLATE) -> str:
    """Captions one per line, in input order, then the request template."""
    if not captions:
        raise RefineError("cannot build a refinement prompt without captions")
    return "\n".join(captions) + "\n" + template


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass
class RefineRequest:
    shape_id: str
    source_captions: List[str]
    request_template: str
    rendered_prompt: str = ""

    def __post_init__(self):
        rendered = build_refine_prompt(self.source_captions, self.request_template)
        if self.rendered_prompt and self.rendered_prompt != rendered:
            raise RefineError(f"{self.shape_id}: rendered prompt does not match its captions and template")
        self.rendered_prompt = rendered


@dataclass
class RefineResult:
    shape_id: str
    refined_captions: List[str]
    provider: str
    cached: bool
    prompt_sha256: str
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return asdict(self)


_MARKER = re.compile(r"^\s*(?:\(?\d+[.):]|[-*•])\s*")


def _norm_ws(s: str) -> str:
    return " ".join(s.split())


def parse_completion(text: str, min_words: int = 3) -> List[str]:
    """Split into lines, strip list markers, drop short/empty lines and duplicates."""
    out, seen = [], set()
    for line in text.splitlines():
        line = _norm_ws(_MARKER.sub("", line, count=1))
        if not line or len(line.split()) < min_words or line in seen:
            continue
        seen.add(line)
        out.append(line)
    return out


class MockProvider:
    """Offline rule-based rewriter.

    Each source caption is whitespace-normalized, capitalized and given a
    final period; a last line merges all captions. Output is numbered.
    """

    provider_id = "mock-rewriter-v1"

    def __init__(self, template: str = DEFAULT_TEMPLATE):
        self.template = template
        self.calls = 0
        self._lock = threading.Lock()

    def _captions(self, prompt: str) -> List[str]:
        suffix = "\n" + self.template
        body = prompt[: -len(suffix)] if prompt.endswith(suffix) else prompt
        return [c for c in (_norm_ws(x) for x in body.splitlines()) if c]

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
        caps = self._captions(prompt)
        lines = []
        for c in caps:
            c = c.rstrip(" .!;,")
            lines.append(c[:1].upper() + c[1:] + ".")
        if len(caps) > 1:
            merged = "; ".join(c.rstrip(" .!;,").lower() for c in caps)
            lines.append(f"An object described as follows: {merged}.")
        return "\n".join(f"{i}. {ln}" for i, ln in enumerate(lines, start=1))


class CompletionClient:
    """Live text-completion client: prompt in, text out, over HTTP.

    The request body is ``{"model", "prompt", "max_tokens", "temperature"}``;
    the reply may carry the text as ``text`` or ``choices[0].text``. The API
    key is only read from the environment variable ``key_env``.
    """

    def __init__(self, endpoint: str, model: str = "text-completion", key_env: str = DEFAULT_KEY_ENV,
                 requests_per_minute: float = 60.0, max_retries: int = 3, backoff: float = 1.0,
                 timeout: float = 60.0, max_tokens: int = 512, temperature: float = 0.7,
                 transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.model = model
        self.key_env = key_env
        self.min_interval = 60.0 / requests_per_minute if requests_per_minute > 0 else 0.0
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.sleep = sleep
        self.calls = 0
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._lock = threading.Lock()
        self._next_slot = 0.0

    @property
    def provider_id(self) -> str:
        return f"live:{self.model}@{self.endpoint}"

    def _throttle(self):
        with self._lock:
            now = time.monotonic()
            wait = self._next_slot - now
            self._next_slot = max(now, self._next_slot) + self.min_interval
        if wait > 0:
            self.sleep(wait)

    def _headers(self) -> dict:
        key = os.environ.get(self.key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def complete(self, prompt: str) -> str:
        body = {"model": self.model, "prompt": prompt, "max_tokens": self.max_tokens,
                "temperature": self.temperature}
        last = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            self._throttle()
            with self._lock:
                self.calls += 1
            try:
                resp = self._client.post(self.endpoint, json=body, headers=self._headers())
            except httpx.HTTPError as e:
                last = f"transport error: {e}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                data = resp.json()
                return data["text"] if "text" in data else data["choices"][0]["text"]
            except (ValueError, KeyError, IndexError, TypeError) as e:
                raise ProviderError(f"unexpected response shape: {e}") from None
        raise ProviderError(f"gave up after {self.max_retries + 1} attempts ({last})")


class PromptCache:
    """Content-addressed completion cache: ``<dir>/<sha256(prompt)>.json``.

    Writes go through a temporary file and an atomic rename, so concurrent
    readers never see partial entries.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, prompt: str) -> Optional[dict]:
        key = prompt_hash(prompt)
        p = self.path(key)
        if not p.is_file():
            self.misses += 1
            return None
        entry = json.loads(p.read_text(encoding="utf-8"))
        if entry.get("prompt_sha256") != key or prompt_hash(entry.get("prompt", "")) != key:
            raise RefineError(f"cache entry {p} does not match its prompt hash")
        self.hits += 1
        return entry

    def put(self, prompt: str, output: str, provider: str) -> dict:
        key = prompt_hash(prompt)
        entry = {"prompt_sha256": key, "prompt": prompt, "output": output, "provider": provider}
        data = json.dumps(entry, sort_keys=True, ensure_ascii=False, indent=1)
        with self._write_lock:
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                f.write(data)
            os.replace(tmp, self.path(key))
        return entry


@dataclass
class RefineConfig:
    template: str = DEFAULT_TEMPLATE
    min_words: int = 3
    workers: int = 1


def _refine_one(shape_id: str, captions: Sequence[str], provider, cache: Optional[PromptCache],
                config: RefineConfig) -> RefineResult:
    try:
        req = RefineRequest(shape_id, list(captions), config.template)
    except RefineError as e:
        return RefineResult(shape_id, [], provider.provider_id, False, "", error=str(e))
    key = prompt_hash(req.rendered_prompt)
    entry = cache.get(req.rendered_prompt) if cache is not None else None
    cached = entry is not None
    if entry is None:
        try:
            output = provider.complete(req.rendered_prompt)
        except ProviderError as e:
            log.warning("refinement of %s failed: %s", shape_id, e)
            return RefineResult(shape_id, [], provider.provider_id, False, key, error=str(e))
        entry = {"output": output, "provider": provider.provider_id}
        if cache is not None:
            cache.put(req.rendered_prompt, output, provider.provider_id)
    refined = parse_completion(entry["output"], config.min_words)
    if not refined:
        return RefineResult(shape_id, [], entry["provider"], cached, key,
                            error="provider output contained no parseable captions")
    return RefineResult(shape_id, refined, entry["provider"], cached, key)


def refine_captions(captions_by_shape, provider, cache: Optional[PromptCache] = None,
                    config: Optional[RefineConfig] = None) -> Dict[str, RefineResult]:
    """Refine every shape's captions; failures become per-shape error records.

    ``captions_by_shape`` is a mapping ``shape_id -> captions`` or a
    :class:`~crosscoherence.datasets.DatasetManifest`.
    """
    config = config or RefineConfig()
    if hasattr(captions_by_shape, "captions") and callable(captions_by_shape.captions):
        captions_by_shape = captions_by_shape.captions()
    ids = sorted(captions_by_shape)
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(
                lambda sid: _refine_one(sid, captions_by_shape[sid], provider, cache, config), ids))
    else:
        results = [_refine_one(sid, captions_by_shape[sid], provider, cache, config) for sid in ids]
    return {r.shape_id: r for r in results}


def results_to_json(results: Dict[str, RefineResult], include_cached_flag: bool = True) -> str:
    rows = []
    for sid in sorted(results):
        d = results[sid].to_dict()
        if not include_cached_flag:
            d.pop("cached")
        rows.append(d)
    return json.dumps(rows, indent=1, sort_keys=True, ensure_ascii=False) + "\n"
