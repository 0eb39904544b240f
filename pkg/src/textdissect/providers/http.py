"""HTTP clients for the remote services the engine talks to.

Wire shapes:

* chat        POST {base}/chat/completions  {"model", "messages", "temperature"}
              -> {"choices": [{"message": {"content": ...}}]}
* generator   POST {url} {"prompt", "steps", "seed"} -> {"image": <base64>}
              or {"rejected": true, "reason": ...} for a content-policy refusal
* classifier  POST {url} {"image": <base64>} (or multipart field "image") -> {"probs": [...]}
* embedding   POST {url} {"input": text} -> {"vector": [...]}
* captioner   POST {url} {"image": <base64>, "n": n} -> {"descriptors": [...]}

Timeouts, connection failures, 429 and 5xx map to TransportError (retried by
the caller); other 4xx and malformed bodies map to ProtocolError.
"""

from __future__ import annotations

import base64
import json
import threading
import time
from collections import defaultdict, deque
from pathlib import Path

import httpx
import numpy as np

from ..errors import ContentPolicyError, ProtocolError, TransportError
from .base import IMAGE, RenderedSample


class RateLimiter:
    """Caps in-flight requests and spaces request starts by ``min_interval`` seconds."""

    def __init__(self, max_concurrency: int = 4, min_interval: float = 0.0, clock=time.monotonic, sleep=time.sleep):
        self._sem = threading.BoundedSemaphore(max_concurrency)
        self._lock = threading.Lock()
        self._next = 0.0
        self.min_interval = min_interval
        self._clock = clock
        self._sleep = sleep

    def __enter__(self):
        self._sem.acquire()
        if self.min_interval > 0:
            with self._lock:
                now = self._clock()
                wait = self._next - now
                self._next = max(now, self._next) + self.min_interval
            if wait > 0:
                self._sleep(wait)
        return self

    def __exit__(self, *exc):
        self._sem.release()
        return False


class _Endpoint:
    def __init__(self, url: str, key: str | None = None, timeout: float = 60.0,
                 client: httpx.Client | None = None, limiter: RateLimiter | None = None):
        if not url:
            raise ValueError("endpoint url is empty")
        self.url = url
        self.key = key
        self.client = client or httpx.Client(timeout=timeout)
        self.limiter = limiter or RateLimiter()

    def _headers(self) -> dict:
        return {"Authorization": f"Bearer {self.key}"} if self.key else {}

    def _post(self, url: str, **kwargs) -> dict:
        with self.limiter:
            try:
                resp = self.client.post(url, headers=self._headers(), **kwargs)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                raise TransportError(f"{url}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"{url}: HTTP {resp.status_code}")
        try:
            body = resp.json()
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ProtocolError(f"{url}: response is not JSON") from exc
        if isinstance(body, dict) and body.get("rejected"):
            raise ContentPolicyError(str(body.get("reason", "rejected by service")))
        if resp.status_code >= 400:
            raise ProtocolError(f"{url}: HTTP {resp.status_code}: {body!r}")
        if not isinstance(body, dict):
            raise ProtocolError(f"{url}: expected a JSON object")
        return body


def _field(body: dict, name: str, url: str):
    if name not in body:
        raise ProtocolError(f"{url}: response lacks {name!r}")
    return body[name]


class HttpChat(_Endpoint):
    def __init__(self, url, model: str, key=None, temperature: float = 0.7, **kw):
        super().__init__(url, key, **kw)
        self.model = model
        self.temperature = temperature

    @property
    def endpoint(self) -> str:
        return self.url.rstrip("/") + "/chat/completions"

    def complete(self, messages: list, request=None) -> str:
        payload = {"model": self.model, "messages": messages, "temperature": self.temperature}
        body = self._post(self.endpoint, json=payload)
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProtocolError(f"{self.endpoint}: malformed chat response") from None
        return content if isinstance(content, str) else ""


class HttpGenerator(_Endpoint):
    def __init__(self, url, key=None, steps: int = 1, seed: int = 0, **kw):
        super().__init__(url, key, **kw)
        self.steps = steps
        self.seed = seed

    def generate(self, prompt: str) -> RenderedSample:
        body = self._post(self.url, json={"prompt": prompt, "steps": self.steps, "seed": self.seed})
        try:
            data = base64.b64decode(_field(body, "image", self.url), validate=True)
        except (ValueError, TypeError) as exc:
            raise ProtocolError(f"{self.url}: image is not base64") from exc
        return RenderedSample(source_prompt=prompt, media_kind=IMAGE, payload=data)


class HttpClassifier(_Endpoint):
    def __init__(self, url, key=None, upload: str = "json", **kw):
        super().__init__(url, key, **kw)
        if upload not in ("json", "multipart"):
            raise ValueError("upload must be 'json' or 'multipart'")
        self.upload = upload
        self.class_count = None

    def classify(self, sample: RenderedSample) -> list:
        if sample.media_kind != IMAGE:
            raise ProtocolError("the classifier service only accepts image samples")
        if self.upload == "json":
            body = self._post(self.url, json={"image": base64.b64encode(sample.payload).decode("ascii")})
        else:
            body = self._post(self.url, files={"image": ("image.png", sample.payload, "image/png")})
        probs = _field(body, "probs", self.url)
        if not isinstance(probs, list) or not probs:
            raise ProtocolError(f"{self.url}: probs must be a non-empty list")
        if self.class_count is None:
            self.class_count = len(probs)
        elif len(probs) != self.class_count:
            raise ProtocolError(f"{self.url}: expected {self.class_count} classes, got {len(probs)}")
        return probs


class HttpEmbedder(_Endpoint):
    def __init__(self, url, key=None, **kw):
        super().__init__(url, key, **kw)
        self.dim = None

    def embed(self, text: str) -> np.ndarray:
        vec = np.asarray(_field(self._post(self.url, json={"input": text}), "vector", self.url), dtype=float)
        if vec.ndim != 1 or vec.size == 0 or not np.all(np.isfinite(vec)):
            raise ProtocolError(f"{self.url}: invalid embedding vector")
        if self.dim is None:
            self.dim = vec.size
        elif vec.size != self.dim:
            raise ProtocolError(f"{self.url}: embedding dim changed from {self.dim} to {vec.size}")
        return vec


class HttpCaptioner(_Endpoint):
    def caption(self, sample: RenderedSample, n: int) -> list:
        if sample.media_kind != IMAGE:
            raise ProtocolError("the captioning service only accepts image samples")
        body = self._post(self.url, json={"image": base64.b64encode(sample.payload).decode("ascii"), "n": n})
        out = _field(body, "descriptors", self.url)
        if not isinstance(out, list):
            raise ProtocolError(f"{self.url}: descriptors must be a list")
        return [str(d) for d in out]


# --- recorded fixtures -----------------------------------------------------

def _request_key(request: httpx.Request) -> tuple:
    body = request.content
    try:
        body = json.dumps(json.loads(body), sort_keys=True)
    except (json.JSONDecodeError, UnicodeDecodeError):
        body = base64.b64encode(body).decode("ascii")
    return request.method, str(request.url), body


class RecordedTransport(httpx.BaseTransport):
    """Replays request/response pairs stored in a JSON fixture file.

    The file holds a list of ``{"request": {"method", "url", "json"},
    "response": {"status", "json"}}`` exchanges. Identical requests are
    answered in recorded order. An unknown request is a protocol error.
    """

    def __init__(self, exchanges: list):
        self._queues = defaultdict(deque)
        for ex in exchanges:
            req = ex["request"]
            key = (req.get("method", "POST"), req["url"], json.dumps(req.get("json"), sort_keys=True))
            self._queues[key].append(ex["response"])

    @classmethod
    def load(cls, path: str | Path) -> "RecordedTransport":
        return cls(json.loads(Path(path).read_text("utf-8")))

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        key = _request_key(request)
        queue = self._queues.get(key)
        if not queue:
            raise ProtocolError(f"no recorded response for {key[0]} {key[1]}")
        resp = queue.popleft() if len(queue) > 1 else queue[0]
        return httpx.Response(resp.get("status", 200), json=resp.get("json"))


class RecordingTransport(httpx.BaseTransport):
    """Wraps a live transport and keeps every JSON exchange for later replay."""

    def __init__(self, inner: httpx.BaseTransport | None = None):
        self.inner = inner or httpx.HTTPTransport()
        self.exchanges = []

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        resp = self.inner.handle_request(request)
        resp.read()
        try:
            req_json = json.loads(request.content)
            resp_json = resp.json()
        except (json.JSONDecodeError, UnicodeDecodeError):
            return resp
        self.exchanges.append({
            "request": {"method": request.method, "url": str(request.url), "json": req_json},
            "response": {"status": resp.status_code, "json": resp_json},
        })
        return resp

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.exchanges, indent=1), "utf-8")
