"""Teacher-side supply of distillation targets.

The real teacher is a hosted multimodal chat model plus a sentence embedder;
neither is bundled here. This module provides everything around that gap:

* a prompt registry (templates are editable data files, one per view)
* an HTTP chat-completion client with an on-disk response cache
* ``fallback_embed``, a deterministic feature-hashing stand-in for the
  sentence embedder
* a synthetic oracle that emits teacher embeddings with a planted
  class/corruption geometry for desk-scale experiments
* the teacher file format and the fixed random projection that bridges the
  teacher embedding dimension d_t to the student dimension d

Teacher embeddings are always gradient-free: no backward path may reach them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .diffcore import ContractError, DimensionError, ParameterError, Tensor, ValidationError
from .fileio import FormatError, check_format_version, floats_json, read_record_lines

logger = logging.getLogger(__name__)

VIEWS = ("text", "image", "cross")
CORRUPTION_TYPES = ("none", "text-fabrication", "image-artifact", "cross-mismatch")
CORRUPTION_VIEW = {
    "text-fabrication": "text",
    "image-artifact": "image",
    "cross-mismatch": "cross",
}
TOKEN_ENV_VAR = "MRD_TEACHER_TOKEN"


# ---------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class PromptTemplate:
    """One view's generation prompt; body carries {TEXT} / {IMAGE_REF} placeholders."""

    view: str
    template_id: str
    body: str

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValidationError(f"unknown view {self.view!r}")
        if not self.body.strip():
            raise ValidationError(f"template {self.template_id!r} has an empty body")

    def fill(self, text: str, image_ref: str) -> str:
        return self.body.replace("{TEXT}", text).replace("{IMAGE_REF}", image_ref)


def default_templates() -> dict[str, PromptTemplate]:
    """Load the bundled per-view templates shipped as package data."""
    templates = {}
    for view in VIEWS:
        body = resources.files("mvrd").joinpath(f"prompts/{view}.txt").read_text("utf-8")
        templates[view] = PromptTemplate(view, f"default-{view}-v1", body)
    return templates


def load_template(path, view: str, template_id: str | None = None) -> PromptTemplate:
    path = Path(path)
    return PromptTemplate(view, template_id or path.stem, path.read_text("utf-8"))


# ---------------------------------------------------------------------------
# embeddings and projection


@dataclass
class TeacherEmbeddings:
    """Per-view reasoning embeddings in student dimension d; gradient-free."""

    text: Tensor
    image: Tensor
    cross: Tensor

    def __post_init__(self):
        dims = set()
        for view in VIEWS:
            t = getattr(self, view)
            if t.requires_grad:
                raise ContractError(f"teacher embedding for {view} must be gradient-free")
            if t.ndim != 1:
                raise DimensionError(f"teacher embedding for {view} must be 1-D, got {t.shape}")
            dims.add(t.shape[0])
        if len(dims) != 1:
            raise DimensionError(f"teacher embeddings disagree on dimension: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.text.shape[0]

    def view(self, name: str) -> Tensor:
        return getattr(self, name)


@dataclass(frozen=True)
class ProjectionSpec:
    """Fixed seeded random projection d_t -> d, stored with any dataset that used it."""

    d_t: int
    d: int
    seed: int

    def matrix(self) -> np.ndarray:
        return _projection_matrix(self.d_t, self.d, self.seed)


@lru_cache(maxsize=64)
def _projection_matrix(d_t: int, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    m = rng.normal(0.0, 1.0 / np.sqrt(d_t), size=(d_t, d))
    m.flags.writeable = False
    return m


def project_teacher(raw: Tensor, spec: ProjectionSpec) -> Tensor:
    """Map a raw d_t-dim teacher embedding into student dimension d (gradient-free)."""
    if raw.ndim != 1 or raw.shape[0] != spec.d_t:
        raise DimensionError(f"raw embedding {raw.shape} does not match d_t={spec.d_t}")
    return Tensor(raw.values @ spec.matrix())


# ---------------------------------------------------------------------------
# reasoning records and the teacher file format


@dataclass
class ReasoningRecord:
    """One generated explanation plus its raw (pre-projection) embedding."""

    sample_id: str
    view: str
    chain: str
    raw_embedding: Tensor

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValidationError(f"unknown view {self.view!r}")
        if self.raw_embedding.requires_grad:
            raise ContractError("raw teacher embeddings must be gradient-free")


@dataclass
class TeacherFileData:
    spec: ProjectionSpec
    records: list[ReasoningRecord]
    embeddings: dict[str, TeacherEmbeddings]


def save_teacher_file(records, spec: ProjectionSpec, path) -> None:
    """Write records in the line-delimited teacher format (17-digit floats)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "format_version": 1,
            "d_t": spec.d_t,
            "d": spec.d,
            "projection_seed": spec.seed,
        }
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            if rec.raw_embedding.shape != (spec.d_t,):
                raise FormatError(
                    f"record ({rec.sample_id}, {rec.view}) has embedding {rec.raw_embedding.shape}, "
                    f"expected ({spec.d_t},)"
                )
            fh.write(
                '{"sample_id": %s, "view": %s, "chain": %s, "embedding": %s}\n'
                % (
                    json.dumps(rec.sample_id),
                    json.dumps(rec.view),
                    json.dumps(rec.chain),
                    floats_json(rec.raw_embedding.values),
                )
            )


def load_teacher_file(path) -> TeacherFileData:
    """Load and validate a teacher file; every sample must carry all three views."""
    path = Path(path)
    header, lines = read_record_lines(path)
    check_format_version(path, header)
    try:
        spec = ProjectionSpec(int(header["d_t"]), int(header["d"]), int(header["projection_seed"]))
    except KeyError as exc:
        raise FormatError(f"{path}: header missing field {exc}") from exc

    records: list[ReasoningRecord] = []
    by_sample: dict[str, dict[str, ReasoningRecord]] = {}
    for lineno, obj in lines:
        try:
            rec = ReasoningRecord(
                sample_id=str(obj["sample_id"]),
                view=str(obj["view"]),
                chain=str(obj["chain"]),
                raw_embedding=Tensor(np.asarray(obj["embedding"], dtype=np.float64)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: line {lineno}: bad record ({exc})") from exc
        if rec.raw_embedding.shape != (spec.d_t,):
            raise FormatError(
                f"{path}: line {lineno}: embedding has dim {rec.raw_embedding.shape[0]}, "
                f"header declares d_t={spec.d_t}"
            )
        slot = by_sample.setdefault(rec.sample_id, {})
        if rec.view in slot:
            raise ValidationError(f"duplicate record for ({rec.sample_id!r}, {rec.view})")
        slot[rec.view] = rec
        records.append(rec)

    missing = [
        (sid, view) for sid, views in by_sample.items() for view in VIEWS if view not in views
    ]
    if missing:
        raise ValidationError(f"missing teacher views: {missing}")

    embeddings = {
        sid: TeacherEmbeddings(
            text=project_teacher(views["text"].raw_embedding, spec),
            image=project_teacher(views["image"].raw_embedding, spec),
            cross=project_teacher(views["cross"].raw_embedding, spec),
        )
        for sid, views in by_sample.items()
    }
    return TeacherFileData(spec=spec, records=records, embeddings=embeddings)


# ---------------------------------------------------------------------------
# deterministic fallback embedder


def fallback_embed(chain: str, d_t: int, seed: int = 0) -> Tensor:
    """Hash character 3-grams into d_t signed buckets, then L2-normalize.

    Deterministic across runs and platforms; the empty (or sub-3-char) string
    maps to the zero vector, which is left unnormalized.
    """
    if d_t < 8:
        raise ParameterError(f"d_t must be >= 8, got {d_t}")
    key = hashlib.blake2b(str(seed).encode(), digest_size=16).digest()
    vec = np.zeros(d_t)
    for i in range(len(chain) - 2):
        gram = chain[i : i + 3].encode("utf-8")
        h = int.from_bytes(hashlib.blake2b(gram, key=key, digest_size=8).digest(), "little")
        sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
        vec[h % d_t] += sign
    norm = np.linalg.norm(vec)
    if norm > 0.0:
        vec /= norm
    return Tensor(vec)


# ---------------------------------------------------------------------------
# synthetic oracle


@lru_cache(maxsize=32)
def teacher_directions(d: int, seed: int) -> dict[str, np.ndarray]:
    """Fixed orthonormal unit vectors: one class direction + one per corruption view."""
    if d < 4:
        raise ParameterError(f"teacher dimension must be >= 4, got {d}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(d, 4)))
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity
    dirs = {"class": q[:, 0], "text": q[:, 1], "image": q[:, 2], "cross": q[:, 3]}
    for v in dirs.values():
        v.flags.writeable = False
    return dirs


def synthetic_teacher_oracle(
    corruption: str,
    label: int,
    d: int,
    noise_sigma: float,
    seed: int,
    directions_seed: int = 0,
    class_scale: float = 1.0,
    corruption_scale: float = 2.0,
) -> TeacherEmbeddings:
    """Emulated teacher reasoning with one embedding per analysis view.

    Each view carries the teacher's *per-view* verdict along the class
    direction: + (looks authentic) unless the corruption targets that view,
    in which case the sign flips and the view's corruption direction is added.
    A clean sample is + in all three views. The per-view structure is what
    makes each distillation term informative about exactly one falsity type.

    ``corruption_scale`` is what gives the teacher its higher signal-to-noise
    ratio relative to the student-side features; callers set it from config.
    """
    if corruption not in CORRUPTION_TYPES:
        raise ParameterError(f"unknown corruption type {corruption!r}")
    if (label == 1) != (corruption != "none"):
        raise ParameterError(
            f"label {label} inconsistent with corruption {corruption!r}"
        )
    dirs = teacher_directions(d, directions_seed)
    targeted = CORRUPTION_VIEW.get(corruption)
    rng = np.random.default_rng(seed)
    out = {}
    for view in VIEWS:
        verdict = -1.0 if view == targeted else 1.0
        emb = class_scale * verdict * dirs["class"]
        if view == targeted:
            emb = emb + corruption_scale * dirs[view]
        if noise_sigma > 0.0:
            emb = emb + noise_sigma * rng.normal(size=d)
        out[view] = Tensor(emb)
    return TeacherEmbeddings(out["text"], out["image"], out["cross"])


# ---------------------------------------------------------------------------
# endpoint client (optional, network-gated)


class TeacherEndpointError(RuntimeError):
    def __init__(self, message: str, view: str, sample_id: str):
        super().__init__(message)
        self.view = view
        self.sample_id = sample_id


@dataclass
class ClientConfig:
    """Settings for the chat-completion endpoint (config key ``teacher.endpoint``)."""

    endpoint: str
    cache_dir: str | Path
    model: str = "teacher-mllm"
    timeout: float = 30.0
    retries: int = 3
    max_in_flight: int = 4


@dataclass
class SamplePayload:
    """What the teacher sees for one sample: raw text plus an opaque image reference."""

    sample_id: str
    text: str
    image_ref: str = ""


@dataclass
class ReasoningClient:
    """Chat-completion client with a one-file-per-key response cache."""

    config: ClientConfig
    network_calls: int = 0
    _pending_warnings: list[str] = field(default_factory=list)

    def cache_key(self, template_id: str, payload: SamplePayload) -> str:
        blob = "\x00".join([template_id, payload.text, payload.image_ref])
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def _cache_path(self, key: str) -> Path:
        return Path(self.config.cache_dir) / key

    def _read_cache(self, key: str) -> str | None:
        path = self._cache_path(key)
        if path.exists():
            return path.read_text("utf-8")
        return None

    def _write_cache(self, key: str, chain: str) -> None:
        cache_dir = Path(self.config.cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        tmp = cache_dir / f".{key}.tmp.{os.getpid()}"
        tmp.write_text(chain, "utf-8")
        os.replace(tmp, self._cache_path(key))  # atomic per key

    def _post_once(self, prompt: str) -> str:
        body = json.dumps(
            {"model": self.config.model, "messages": [{"role": "user", "content": prompt}]}
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(TOKEN_ENV_VAR)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        request = urllib.request.Request(self.config.endpoint, data=body, headers=headers)
        self.network_calls += 1
        with urllib.request.urlopen(request, timeout=self.config.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        try:
            content = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            logger.warning("malformed endpoint response; recording empty chain")
            return ""
        return content if isinstance(content, str) else ""

    def fetch_chain(self, template: PromptTemplate, payload: SamplePayload) -> str:
        key = self.cache_key(template.template_id, payload)
        cached = self._read_cache(key)
        if cached is not None:
            return cached
        prompt = template.fill(payload.text, payload.image_ref)
        attempts = max(1, self.config.retries)
        last_error: Exception | None = None
        for _ in range(attempts):
            try:
                chain = self._post_once(prompt)
            except (urllib.error.URLError, TimeoutError, OSError) as exc:
                last_error = exc
                continue
            self._write_cache(key, chain)
            return chain
        raise TeacherEndpointError(
            f"endpoint failed after {attempts} attempts for "
            f"({payload.sample_id}, {template.view}): {last_error}",
            view=template.view,
            sample_id=payload.sample_id,
        )


def generate_reasoning(
    client: ReasoningClient,
    payload: SamplePayload,
    templates: dict[str, PromptTemplate],
    d_t: int,
    embed_seed: int = 0,
) -> list[ReasoningRecord]:
    """One record per view; chains come from the endpoint (cache-first), embeddings
    from the deterministic fallback embedder."""
    records = []
    for view in VIEWS:
        chain = client.fetch_chain(templates[view], payload)
        records.append(
            ReasoningRecord(
                sample_id=payload.sample_id,
                view=view,
                chain=chain,
                raw_embedding=fallback_embed(chain, d_t, embed_seed),
            )
        )
    return records


def generate_reasoning_batch(
    client: ReasoningClient,
    payloads,
    templates: dict[str, PromptTemplate],
    d_t: int,
    embed_seed: int = 0,
) -> list[ReasoningRecord]:
    """Generate for many samples with at most ``max_in_flight`` concurrent requests."""
    results: list[list[ReasoningRecord]] = [None] * len(payloads)  # type: ignore[list-item]

    def work(i_payload):
        i, payload = i_payload
        results[i] = generate_reasoning(client, payload, templates, d_t, embed_seed)

    workers = max(1, client.config.max_in_flight)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(work, enumerate(payloads)))
    return [rec for group in results for rec in group]
