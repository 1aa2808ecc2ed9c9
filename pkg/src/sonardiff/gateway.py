"""Client for the prompt/caption language services, with an offline stub.

Wire protocol (http mode): ``POST <endpoint_url>`` with JSON body
``{"kind": "text"|"vision", "prompt": str, "image_b64": str?}``; the service
answers ``{"text": str}``.  Failed calls are retried with exponential
backoff (``base_backoff_ms * 2**attempt``).

The stub mode answers from templates and a seeded sampler and never touches
the network.  Every response, in either mode, is appended to the audit log.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import ImageGrid, to_uint8
from .conditioning import BACKGROUND_TAGS, GRAMMAR, parse_tags
from .datasets import bright_blob_centroid
from .errors import ConfigurationError, GatewayError, ParameterError, ValidationError

log = logging.getLogger(__name__)

DOMAIN_PROMPT = (
    'Given the side scan sonar image and the caption: "{caption}", where PL__*, SH__*, CYM*, ASF*, TCM* '
    "represent the objects in the image, and AS__*, AP__*, SEF* represent the background. The numbers "
    "following these abbreviations can range from one to five digits. Provide the following descriptions: "
    "A low-level description focusing on simple details and objects visible in the image. "
    "A high-level description interpreting the scene or conveying a broader understanding based on the "
    "image and the given caption."
)

_OBJECT_WORDS = {"SH": "ship", "PL": "plane", "CYM": "mine", "ASF": "object", "TCM": "object"}
_FLOOR_WORDS = {"AS": "sandy", "AP": "flat", "SEF": "rocky"}


@dataclass
class GatewayConfig:
    mode: str = "stub"
    endpoint_url: str | None = None
    timeout_ms: int = 30000
    max_retries: int = 3
    base_backoff_ms: int = 500
    seed: int = 0
    audit_log: str | None = None

    def __post_init__(self):
        if self.mode not in ("stub", "http"):
            raise ConfigurationError(f"gateway mode must be stub or http, got {self.mode!r}")
        if self.mode == "http" and not self.endpoint_url:
            raise ConfigurationError("http mode requires endpoint_url")
        if self.timeout_ms <= 0:
            raise ConfigurationError("timeout_ms must be positive")
        if self.max_retries < 0:
            raise ConfigurationError("max_retries must be >= 0")

    @classmethod
    def from_env(cls, **overrides) -> "GatewayConfig":
        kw = {}
        if os.environ.get("GATEWAY_MODE"):
            kw["mode"] = os.environ["GATEWAY_MODE"]
        if os.environ.get("GATEWAY_URL"):
            kw["endpoint_url"] = os.environ["GATEWAY_URL"]
        if os.environ.get("GATEWAY_TIMEOUT_MS"):
            kw["timeout_ms"] = int(os.environ["GATEWAY_TIMEOUT_MS"])
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


@dataclass(frozen=True)
class GatewayRequest:
    kind: str
    prompt: str
    image_b64: str | None = None

    def __post_init__(self):
        if self.kind not in ("text", "vision"):
            raise ValidationError(f"request kind must be text or vision, got {self.kind!r}")
        if not self.prompt or not self.prompt.strip():
            raise ValidationError("request prompt is empty")
        if self.kind == "vision" and not self.image_b64:
            raise ValidationError("vision requests must carry an image")
        if self.kind == "text" and self.image_b64:
            raise ValidationError("text requests must not carry an image")

    def body(self) -> dict:
        body = {"kind": self.kind, "prompt": self.prompt}
        if self.image_b64:
            body["image_b64"] = self.image_b64
        return body

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.body(), sort_keys=True).encode()).hexdigest()


def encode_png_b64(img) -> str:
    from PIL import Image

    px = img.pixels if isinstance(img, ImageGrid) else np.asarray(img)
    if px.ndim == 3 and px.shape[-1] == 1:
        px = px[:, :, 0]
    buf = io.BytesIO()
    Image.fromarray(to_uint8(px)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_b64(data: str) -> ImageGrid:
    from PIL import Image

    if not data:
        raise ValidationError("empty image payload")
    with Image.open(io.BytesIO(base64.b64decode(data))) as im:
        px = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return ImageGrid(px, dynamic_range=255.0)


def _position_words(cx: float, cy: float, w: int, h: int) -> str:
    def side(v, n, lo, hi):
        f = v / max(n - 1, 1)
        return lo if f < 0.4 else hi if f > 0.6 else None

    horiz = side(cx, w, "left", "right")
    vert = side(cy, h, "upper", "lower")
    if horiz and vert:
        return f"in the {vert} {horiz} part of the image"
    if horiz:
        return f"{horiz} of center"
    if vert:
        return f"in the {vert} part of the image"
    return "near the center of the image"


class _Stub:
    """Deterministic template answers; the request hash seeds any randomness."""

    def __init__(self, seed: int):
        self.seed = seed

    def _rng(self, req: GatewayRequest) -> np.random.Generator:
        h = int(req.digest()[:16], 16)
        return np.random.default_rng([self.seed, h])

    def answer(self, req: GatewayRequest, caption: str | None = None) -> str:
        if req.kind == "vision":
            return self._describe(req, caption)
        if req.prompt.startswith("ELEVATE:"):
            return self._elevate(req.prompt[len("ELEVATE:"):].strip())
        raise GatewayError("stub only answers description and elevation requests")

    def _describe(self, req: GatewayRequest, caption: str | None) -> str:
        img = decode_png_b64(req.image_b64)
        tags = parse_tags(caption or req.prompt)
        objects = [t for t in tags if t.kind == "object"]
        floors = [t for t in tags if t.kind == "background"]
        px = img.pixels[:, :, 0]
        blob = bright_blob_centroid(px)
        h, w = px.shape
        parts = []
        if blob is not None:
            where = _position_words(blob[0], blob[1], w, h)
            if objects:
                names = " and ".join(f"a {_OBJECT_WORDS.get(t.prefix, 'object')} marked {t.text}" for t in objects)
                parts.append(f"The image shows {names}, a strong return {where}.")
            else:
                parts.append(f"The image shows a strong echo {where}.")
            parts.append("A dark acoustic shadow lies beside the object.")
        else:
            if objects:
                names = " and ".join(t.text for t in objects)
                parts.append(f"The image shows no clear strong return although the caption lists {names}.")
            else:
                parts.append("The image shows open seafloor with no distinct object.")
        texture = "grainy" if float(px.std()) > 0.12 else "smooth"
        if floors:
            floor_names = " and ".join(f"{_FLOOR_WORDS.get(t.prefix, 'seabed')} seabed {t.text}" for t in floors)
            parts.append(f"The background is {texture} {floor_names}.")
        else:
            parts.append(f"The background is {texture} seabed.")
        return " ".join(parts)

    def _elevate(self, low: str) -> str:
        tags = [t.text for t in parse_tags(low)]
        objects = [t for t in parse_tags(low) if t.kind == "object"]
        floors = [t for t in parse_tags(low) if t.kind == "background"]
        first = re.split(r"(?<=[.!?])\s+", low.strip())[0].rstrip(".")
        if objects:
            kind = _OBJECT_WORDS.get(objects[0].prefix, "object")
            head = f"The image likely depicts a {kind} designated " + ", ".join(t.text for t in objects)
        else:
            head = "The image likely depicts open seafloor"
        if floors:
            head += " resting on a seabed with the " + " and ".join(t.text for t in floors) + " terrain as the background"
        text = f"{head}. {first}."
        missing = [t for t in tags if t not in text]
        if missing:
            text += " Tags: " + " ".join(missing) + "."
        return text

    def expand(self, topic: str, n: int) -> list[str]:
        rng = np.random.default_rng([self.seed, int(hashlib.sha256(topic.encode()).hexdigest()[:16], 16)])
        wanted = [p for p, word in _OBJECT_WORDS.items() if word in topic.lower() and word != "object"]
        prefixes = wanted or ["SH", "PL", "CYM"]
        out, seen = [], set()
        attempts = 0
        while len(out) < n:
            attempts += 1
            if attempts > 1000 * n:
                raise GatewayError("stub prompt space exhausted")
            obj = prefixes[int(rng.integers(len(prefixes)))]
            floor = BACKGROUND_TAGS[int(rng.integers(len(BACKGROUND_TAGS)))]
            o = GRAMMAR.make(obj, int(rng.integers(1, 1000)))
            b = GRAMMAR.make(floor, int(rng.integers(1, 1000)))
            text = f"image of {o} {_OBJECT_WORDS[obj]} on the {b} seabed"
            if text not in seen:
                seen.add(text)
                out.append(text)
        return out


class Gateway:
    def __init__(self, cfg: GatewayConfig | None = None, transport=None, sleep=time.sleep):
        self.cfg = cfg or GatewayConfig()
        self._stub = _Stub(self.cfg.seed)
        self._transport = transport
        self._sleep = sleep
        self._lock = threading.Lock()
        self._client = None

    # -- transport

    def _http_client(self):
        if self._client is None:
            import httpx

            self._client = httpx.Client(timeout=self.cfg.timeout_ms / 1000.0, transport=self._transport)
        return self._client

    def _post(self, req: GatewayRequest) -> str:
        import httpx

        client = self._http_client()
        last = None
        for attempt in range(self.cfg.max_retries + 1):
            try:
                resp = client.post(self.cfg.endpoint_url, json=req.body())
                resp.raise_for_status()
                text = resp.json().get("text")
                if not isinstance(text, str) or not text.strip():
                    raise GatewayError("response lacks a non-empty 'text' field")
                return text
            except (httpx.HTTPError, ValueError, GatewayError) as exc:
                last = exc
                if attempt < self.cfg.max_retries:
                    delay = self.cfg.base_backoff_ms * (2 ** attempt) / 1000.0
                    log.warning("gateway call failed (%s); retry %d in %.1fs", exc, attempt + 1, delay)
                    self._sleep(delay)
        raise GatewayError(f"gateway request failed after {self.cfg.max_retries + 1} attempts: {last}") from last

    def _audit(self, req: GatewayRequest, latency_ms: float, ok: bool):
        if not self.cfg.audit_log:
            return
        rec = {
            "request_hash": req.digest(),
            "kind": req.kind,
            "mode": self.cfg.mode,
            "latency_ms": round(latency_ms, 3),
            "ok": ok,
        }
        path = Path(self.cfg.audit_log)
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def send(self, req: GatewayRequest, caption: str | None = None) -> str:
        t0 = time.perf_counter()
        ok = False
        try:
            if self.cfg.mode == "stub":
                text = self._stub.answer(req, caption)
            else:
                text = self._post(req)
            ok = True
            return text
        finally:
            self._audit(req, (time.perf_counter() - t0) * 1000.0, ok)

    # -- operations

    def expand_prompts(self, topic: str, n: int) -> list[str]:
        if n < 1:
            raise ParameterError("n must be >= 1")
        if self.cfg.mode == "stub":
            req = GatewayRequest("text", f"EXPAND:{topic}:{n}")
            t0 = time.perf_counter()
            out = self._stub.expand(topic, n)
            self._audit(req, (time.perf_counter() - t0) * 1000.0, True)
            return out
        prompt = (
            f"Write {n} distinct short prompts describing side scan sonar images of {topic}. "
            "Use object tags like SH34* and seabed tags like AP238*. One prompt per line."
        )
        text = self.send(GatewayRequest("text", prompt))
        lines = [ln.strip(" -*0123456789.\t") for ln in text.splitlines()]
        lines = list(dict.fromkeys(ln for ln in lines if ln))
        if len(lines) < n:
            raise GatewayError(f"service returned {len(lines)} prompts, {n} requested")
        return lines[:n]

    def describe_low_level(self, image, domain_prompt: str | None = None, caption: str | None = None) -> str:
        if image is None:
            raise ValidationError("vision request without an image")
        payload = image if isinstance(image, str) else encode_png_b64(image)
        if not payload:
            raise ValidationError("vision request without an image")
        prompt = (domain_prompt or DOMAIN_PROMPT)
        if "{caption}" in prompt:
            prompt = prompt.replace("{caption}", caption or "")
        text = self.send(GatewayRequest("vision", prompt, payload), caption=caption)
        if not text.strip():
            raise GatewayError("empty description")
        return text

    def elevate_to_high_level(self, low_desc: str) -> str:
        if not low_desc or not low_desc.strip():
            raise ParameterError("low-level description is empty")
        if self.cfg.mode == "stub":
            return self.send(GatewayRequest("text", "ELEVATE: " + low_desc))
        prompt = (
            "Rewrite the following low-level description of a side scan sonar image as a short high-level "
            "description of the scene. Keep every tag (e.g. SH33*, AP637*) verbatim.\n\n" + low_desc
        )
        return self.send(GatewayRequest("text", prompt))


def _gateway(cfg) -> Gateway:
    if isinstance(cfg, Gateway):
        return cfg
    return Gateway(cfg)


def expand_prompts(topic: str, n: int, cfg=None) -> list[str]:
    return _gateway(cfg).expand_prompts(topic, n)


def describe_low_level(image, domain_prompt: str | None = None, cfg=None, caption: str | None = None) -> str:
    return _gateway(cfg).describe_low_level(image, domain_prompt, caption)


def elevate_to_high_level(low_desc: str, cfg=None) -> str:
    return _gateway(cfg).elevate_to_high_level(low_desc)
