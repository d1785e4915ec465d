"""Client contracts for chat completion, image editing and VQA, plus
deterministic local implementations so the whole pipeline runs offline.

The remote transports speak JSON over HTTP and log every call (request
hash, latency, outcome) without ever logging credentials. The local
compositor and rule-based VQA are pure functions of (inputs, seed,
library), which keeps every pipeline decision replayable.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol

import numpy as np
from PIL import Image

from .images import decode_png, encode_png, from_pil, to_u8


@dataclass(frozen=True)
class ChatRequest:
    user: str
    system: str = ""
    temperature: float = 0.0
    seed: int | None = None


@dataclass(frozen=True)
class ChatResponse:
    text: str
    status: str = "ok"  # ok | error
    error: str | None = None


@dataclass(frozen=True)
class EditRequest:
    image_png: bytes
    prompt: str
    args: Mapping[str, object] = field(default_factory=dict)
    seed: int = 0


@dataclass(frozen=True)
class EditResponse:
    image_png: bytes | None
    status: str = "ok"
    metadata: Mapping[str, object] = field(default_factory=dict)
    error: str | None = None


@dataclass(frozen=True)
class VqaRequest:
    image_png: bytes
    question: str
    metadata: Mapping[str, object] | None = None


@dataclass(frozen=True)
class VqaResponse:
    answer: str  # normalized to yes | no
    raw_text: str = ""
    error: str | None = None


class ChatClient(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


class EditBackend(Protocol):
    def edit(self, request: EditRequest) -> EditResponse: ...


class VqaClient(Protocol):
    def ask(self, request: VqaRequest) -> VqaResponse: ...


def normalize_answer(text: str) -> str:
    """First-token yes/no match; anything else fails closed to 'no'."""
    token = text.strip().split()[0].lower().strip(".,!?:;\"'") if text.strip() else ""
    return "yes" if token == "yes" else "no"


# ---------------------------------------------------------------------------
# HTTP transports
# ---------------------------------------------------------------------------


class TokenBucket:
    """Per-endpoint rate limiter; thread-safe, refills continuously."""

    def __init__(self, rate_per_s: float, burst: int = 1) -> None:
        self.rate = rate_per_s
        self.capacity = float(burst)
        self.tokens = float(burst)
        self.updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            time.sleep(wait)


class HttpClientBase:
    """Shared JSON-over-HTTP plumbing: retries, payload cap, rate limiting,
    audit trail."""

    def __init__(
        self,
        endpoint: str,
        api_key_env: str | None = None,
        timeout: float = 30.0,
        max_retries: int = 2,
        backoff_base: float = 0.5,
        max_payload_bytes: int = 8 * 1024 * 1024,
        rate_limit_per_s: float | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.max_payload_bytes = max_payload_bytes
        self.bucket = TokenBucket(rate_limit_per_s) if rate_limit_per_s else None
        self.audit: list[dict] = []

    def _post(self, payload: dict) -> tuple[dict | None, str | None, int]:
        """POST with retries; returns (json body, error, attempts made)."""
        body = json.dumps(payload).encode()
        request_hash = hashlib.sha256(body).hexdigest()
        start = time.monotonic()
        if len(body) > self.max_payload_bytes:
            self.audit.append({
                "request_sha256": request_hash, "latency_s": 0.0,
                "outcome": "rejected_oversize", "attempts": 0,
            })
            return None, f"payload {len(body)}B exceeds cap {self.max_payload_bytes}B", 0
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env) if self.api_key_env else None
        if key:
            headers["Authorization"] = f"Bearer {key}"
        error = None
        attempts = 0
        for attempt in range(self.max_retries + 1):
            attempts = attempt + 1
            if self.bucket is not None:
                self.bucket.acquire()
            try:
                req = urllib.request.Request(self.endpoint, data=body, headers=headers)
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    data = json.loads(resp.read().decode())
                self.audit.append({
                    "request_sha256": request_hash,
                    "latency_s": time.monotonic() - start,
                    "outcome": "ok", "attempts": attempts,
                })
                return data, None, attempts
            except (urllib.error.HTTPError, urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
                error = str(exc)
                if attempt < self.max_retries:
                    time.sleep(self.backoff_base * (2 ** attempt))
        self.audit.append({
            "request_sha256": request_hash,
            "latency_s": time.monotonic() - start,
            "outcome": "error", "attempts": attempts,
        })
        return None, error, attempts


class HttpChatClient(HttpClientBase):
    def __init__(self, endpoint: str, model: str = "default", **kwargs) -> None:
        super().__init__(endpoint, **kwargs)
        self.model = model

    def complete(self, request: ChatRequest) -> ChatResponse:
        messages = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        messages.append({"role": "user", "content": request.user})
        payload = {
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "seed": request.seed,
        }
        data, error, _ = self._post(payload)
        if data is None:
            return ChatResponse(text="", status="error", error=error)
        if "text" in data:
            return ChatResponse(text=str(data["text"]))
        try:
            return ChatResponse(text=data["choices"][0]["message"]["content"])
        except (KeyError, IndexError, TypeError):
            return ChatResponse(text="", status="error", error=f"unexpected reply shape: {list(data)[:4]}")


class HttpEditClient(HttpClientBase):
    def edit(self, request: EditRequest) -> EditResponse:
        payload = {
            "image": base64.b64encode(request.image_png).decode(),
            "prompt": request.prompt,
            "args": dict(request.args),
            "seed": request.seed,
        }
        data, error, _ = self._post(payload)
        if data is None:
            return EditResponse(image_png=None, status="error", error=error)
        try:
            raw = base64.b64decode(data["image"])
        except (KeyError, TypeError, ValueError) as exc:
            return EditResponse(image_png=None, status="error", error=f"bad reply: {exc}")
        try:
            decoded = decode_png(raw)
        except Exception as exc:  # corrupt bytes from the wire
            return EditResponse(image_png=None, status="error", error=f"undecodable image: {exc}")
        want = decode_png(request.image_png).shape
        if decoded.shape != want:
            return EditResponse(image_png=None, status="error",
                                error=f"edited image shape {decoded.shape} != input {want}")
        return EditResponse(image_png=raw, metadata=data.get("metadata", {}))


class HttpVqaClient(HttpClientBase):
    def ask(self, request: VqaRequest) -> VqaResponse:
        payload = {
            "image": base64.b64encode(request.image_png).decode(),
            "question": request.question,
        }
        data, error, _ = self._post(payload)
        if data is None:
            return VqaResponse(answer="no", raw_text="", error=error)
        raw = str(data.get("answer", ""))
        return VqaResponse(answer=normalize_answer(raw), raw_text=raw)


# ---------------------------------------------------------------------------
# local deterministic stand-ins
# ---------------------------------------------------------------------------


class SpriteLibrary:
    """Trigger text -> list of RGBA sprite rasters."""

    def __init__(self) -> None:
        self.entries: dict[str, list[np.ndarray]] = {}

    def register(self, trigger: str, sprites: list[np.ndarray]) -> None:
        if not sprites:
            raise ValueError("sprite list must be nonempty")
        for s in sprites:
            if s.ndim != 3 or s.shape[2] != 4 or s.dtype != np.uint8:
                raise ValueError("sprites must be (H, W, 4) uint8 RGBA")
        self.entries[trigger.lower()] = [np.ascontiguousarray(s) for s in sprites]

    def get(self, trigger: str) -> list[np.ndarray]:
        key = trigger.lower()
        if key not in self.entries:
            raise KeyError(f"trigger not registered: {trigger}")
        return self.entries[key]

    def __contains__(self, trigger: str) -> bool:
        return trigger.lower() in self.entries

    @classmethod
    def from_dir(cls, root: Path | str) -> "SpriteLibrary":
        """Load ``<root>/<trigger>/*.png`` RGBA files."""
        lib = cls()
        root = Path(root)
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            sprites = []
            for f in sorted(sub.glob("*.png")):
                with Image.open(f) as img:
                    sprites.append(from_pil(img.convert("RGBA")))
            if sprites:
                lib.register(sub.name.replace("_", " "), sprites)
        return lib


def _gradient_energy(image: np.ndarray) -> np.ndarray:
    gray = image.astype(np.float64).mean(axis=2)
    gy, gx = np.gradient(gray)
    return np.abs(gx) + np.abs(gy)


def _rotate_rgba(sprite: np.ndarray, degrees: float) -> np.ndarray:
    pil = Image.fromarray(sprite, mode="RGBA").rotate(
        degrees, resample=Image.BILINEAR, expand=True, fillcolor=(0, 0, 0, 0)
    )
    return np.asarray(pil, dtype=np.uint8)


def _resize_rgba(sprite: np.ndarray, side: int) -> np.ndarray:
    pil = Image.fromarray(sprite, mode="RGBA").resize((side, side), Image.BILINEAR)
    return np.asarray(pil, dtype=np.uint8)


class LocalCompositorEdit:
    """Offline edit backend: alpha-composites a sprite for the trigger at a
    low-saliency location, with seeded scale/rotation/brightness variation.

    The candidate placement grid is scanned row-major and the window with
    the smallest mean gradient energy wins; exact ties keep the earliest
    (top-left) candidate, which makes the behavior fully predictable on
    structureless images.
    """

    def __init__(self, library: SpriteLibrary, grid: int = 4) -> None:
        self.library = library
        self.grid = grid

    def edit(self, request: EditRequest) -> EditResponse:
        trigger = str(request.args.get("trigger", request.prompt))
        if trigger not in self.library:
            return EditResponse(image_png=None, status="error", error=f"unregistered trigger: {trigger}")
        image = decode_png(request.image_png)
        h, w, c = image.shape
        rng = np.random.default_rng(request.seed)

        variants = self.library.get(trigger)
        variant = int(rng.integers(len(variants)))
        scale = float(rng.uniform(0.12, 0.25))
        rotation = float(rng.uniform(-15.0, 15.0))
        brightness = float(rng.uniform(-0.10, 0.10))

        side = max(1, int(round(scale * min(h, w))))
        sprite = _resize_rgba(variants[variant], side)
        sprite = _rotate_rgba(sprite, rotation)
        sh, sw = sprite.shape[:2]
        if sh > h or sw > w:
            sprite = _resize_rgba(variants[variant], max(1, min(h, w) // 4))
            sh, sw = sprite.shape[:2]

        energy = _gradient_energy(image)
        ys = np.unique(np.linspace(0, h - sh, self.grid).round().astype(int))
        xs = np.unique(np.linspace(0, w - sw, self.grid).round().astype(int))
        best = None
        for y in ys:
            for x in xs:
                e = energy[y:y + sh, x:x + sw].mean()
                if best is None or e < best[0]:
                    best = (e, int(y), int(x))
        _, y, x = best

        rgb = sprite[:, :, :3].astype(np.float64) * (1.0 + brightness)
        alpha = sprite[:, :, 3:4].astype(np.float64) / 255.0
        out = image.astype(np.float64).copy()
        region = out[y:y + sh, x:x + sw, :]
        if c == 1:
            rgb = rgb.mean(axis=2, keepdims=True)
        out[y:y + sh, x:x + sw, :] = alpha * np.clip(rgb, 0, 255) + (1.0 - alpha) * region
        result = to_u8(out)

        coverage = float(alpha.sum() / (h * w))
        metadata = {
            "placement": {"x": x, "y": y, "scale": scale, "rotation": rotation, "variant": variant},
            "coverage": coverage,
            "footprint": [x, y, sw, sh],
            "image_size": [w, h],
            "brightness": brightness,
        }
        return EditResponse(image_png=encode_png(result), metadata=metadata)


class LocalRuleVqa:
    """Offline QA: answers the two stock criteria from compositor metadata.

    'exists'     -> yes iff composited alpha coverage >= 1% of the image.
    'compatible' -> yes iff at most half of the sprite footprint falls in
                    the central 20% x 20% region (subject-occlusion proxy).
    Unknown criteria and missing metadata answer no.
    """

    coverage_floor = 0.01
    central_fraction = 0.20
    overlap_cap = 0.50

    def ask(self, request: VqaRequest) -> VqaResponse:
        meta = request.metadata or {}
        question = request.question.lower()
        if "exists in the image" in question:
            ok = float(meta.get("coverage", 0.0)) >= self.coverage_floor
            return VqaResponse(answer="yes" if ok else "no", raw_text="rule:exists")
        if "compatible with the background" in question:
            if "footprint" not in meta or "image_size" not in meta:
                return VqaResponse(answer="no", raw_text="rule:compatible:no-metadata")
            x, y, sw, sh = (float(v) for v in meta["footprint"])
            w, h = (float(v) for v in meta["image_size"])
            cw, ch = w * self.central_fraction, h * self.central_fraction
            cx0, cy0 = (w - cw) / 2.0, (h - ch) / 2.0
            ix = max(0.0, min(x + sw, cx0 + cw) - max(x, cx0))
            iy = max(0.0, min(y + sh, cy0 + ch) - max(y, cy0))
            overlap = (ix * iy) / (sw * sh) if sw * sh > 0 else 0.0
            ok = overlap <= self.overlap_cap
            return VqaResponse(answer="yes" if ok else "no", raw_text=f"rule:compatible:{overlap:.3f}")
        return VqaResponse(answer="no", raw_text="rule:unknown-criterion")


# ---------------------------------------------------------------------------
# fixture / stub clients for offline tests and dry runs
# ---------------------------------------------------------------------------


class StaticChatClient:
    """Always replies with a fixed text (fixture-backed selection runs)."""

    def __init__(self, text: str) -> None:
        self.text = text
        self.calls = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.calls += 1
        return ChatResponse(text=self.text)


class EchoEditBackend:
    """Returns the input image unchanged (degenerate edit stub)."""

    def __init__(self) -> None:
        self.calls = 0

    def edit(self, request: EditRequest) -> EditResponse:
        self.calls += 1
        return EditResponse(image_png=request.image_png, metadata={})


class ScriptedVqa:
    """Answers from a callable (question, call_index) -> bool."""

    def __init__(self, rule: Callable[[str, int], bool]) -> None:
        self.rule = rule
        self.calls = 0

    def ask(self, request: VqaRequest) -> VqaResponse:
        verdict = self.rule(request.question, self.calls)
        self.calls += 1
        return VqaResponse(answer="yes" if verdict else "no", raw_text="scripted")

