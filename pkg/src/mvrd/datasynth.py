"""Synthetic dataset generation and feature-file ingestion.

Real samples draw all four embedded sequences around one shared latent, so
the modalities agree. Fake samples carry exactly one falsity type:

* text-fabrication: a fixed corruption direction is added to a seeded subset
  of text token positions
* image-artifact: the same, on image patch positions
* cross-mismatch: the aligned image sequence is built from a *different
  sample's* latent, while text/image/aligned-text stay self-consistent, so the
  inconsistency is only visible to the cross view

The student-side corruption amplitude is deliberately attenuated relative to
the synthetic teacher's, which is what makes distillation measurably useful
at desk scale.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .diffcore import ParameterError, Tensor, ValidationError
from .fileio import FormatError, floats2d_json, read_record_lines
from .teacher import (
    CORRUPTION_TYPES,
    TeacherEmbeddings,
    synthetic_teacher_oracle,
)
from .views import SOURCE_TAGS, EmbeddedSequence

FAKE_TYPES = ("text-fabrication", "image-artifact", "cross-mismatch")


@dataclass
class Sample:
    """One news item at desk scale: label, four embedded sequences, teacher targets."""

    sample_id: str
    label: int
    corruption: str
    text_seq: EmbeddedSequence
    image_seq: EmbeddedSequence
    clip_text_seq: EmbeddedSequence
    clip_image_seq: EmbeddedSequence
    teacher: TeacherEmbeddings | None = None

    def __post_init__(self):
        if self.corruption not in CORRUPTION_TYPES:
            raise ValidationError(f"unknown corruption type {self.corruption!r}")
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 (real) or 1 (fake), got {self.label}")
        if (self.label == 1) != (self.corruption != "none"):
            raise ValidationError(
                f"sample {self.sample_id!r}: label {self.label} inconsistent with "
                f"corruption {self.corruption!r}"
            )

    def sequences(self) -> dict[str, EmbeddedSequence]:
        return {
            "text-tokens": self.text_seq,
            "image-patches": self.image_seq,
            "clip-text": self.clip_text_seq,
            "clip-image": self.clip_image_seq,
        }


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the synthetic corpus; fully seed-deterministic."""

    n_samples: int = 2500
    class_balance: float = 0.5
    corruption_mix: tuple = (1 / 3, 1 / 3, 1 / 3)
    d_in: int = 32
    len_text: int = 8
    len_image: int = 8
    len_clip: int = 4
    signal_strength: float = 2.0
    student_corruption_snr: float = 4.0
    noise_sigma: float = 1.0
    clip_alignment_gain: float = 2.0
    teacher_dim: int = 32
    teacher_snr_ratio: float = 4.0
    seed: int = 0

    def validate(self) -> "SyntheticConfig":
        if self.n_samples < 1:
            raise ParameterError(f"n_samples must be >= 1, got {self.n_samples}")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ParameterError(f"class_balance must lie in [0, 1], got {self.class_balance}")
        mix = np.asarray(self.corruption_mix, dtype=np.float64)
        if len(mix) != len(FAKE_TYPES) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise ParameterError(
                f"corruption_mix must be {len(FAKE_TYPES)} nonnegative proportions summing to 1, "
                f"got {self.corruption_mix}"
            )
        if min(self.len_text, self.len_image, self.len_clip) < 1:
            raise ParameterError("sequence lengths must be >= 1")
        if self.d_in < 2 or self.teacher_dim < 4:
            raise ParameterError("d_in must be >= 2 and teacher_dim >= 4")
        if self.noise_sigma < 0 or self.signal_strength < 0 or self.student_corruption_snr < 0:
            raise ParameterError("signal and noise magnitudes must be nonnegative")
        if self.clip_alignment_gain <= 0:
            raise ParameterError("clip_alignment_gain must be positive")
        if self.teacher_snr_ratio < 1:
            raise ParameterError("teacher_snr_ratio must be >= 1")
        return self

    @property
    def student_corruption_scale(self) -> float:
        return self.signal_strength * self.student_corruption_snr

    @property
    def teacher_corruption_scale(self) -> float:
        return self.teacher_snr_ratio * self.student_corruption_scale

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)


@lru_cache(maxsize=32)
def _student_directions(d_in: int, seed: int) -> dict[str, np.ndarray]:
    """Fixed orthonormal corruption directions in input space."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD1)))
    q, r = np.linalg.qr(rng.normal(size=(d_in, 2)))
    q = q * np.sign(np.diag(r))
    dirs = {"text": q[:, 0], "image": q[:, 1]}
    for v in dirs.values():
        v.flags.writeable = False
    return dirs


def _assignments(cfg: SyntheticConfig) -> list[tuple[int, str]]:
    """Exact label/corruption counts: class balance, then largest-remainder mix."""
    n_real = round(cfg.n_samples * cfg.class_balance)
    n_fake = cfg.n_samples - n_real
    raw = [p * n_fake for p in cfg.corruption_mix]
    counts = [int(np.floor(x)) for x in raw]
    remainders = sorted(range(len(raw)), key=lambda i: (raw[i] - counts[i], -i), reverse=True)
    for i in remainders[: n_fake - sum(counts)]:
        counts[i] += 1
    out = [(0, "none")] * n_real
    for kind, count in zip(FAKE_TYPES, counts):
        out.extend([(1, kind)] * count)
    return out


def _latent(cfg: SyntheticConfig, index: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index, 0)))
    return rng.normal(size=cfg.d_in)


def _planted_positions(rng: np.random.Generator, length: int) -> np.ndarray:
    # corrupt a sparse subset of positions: mean pooling dilutes the signal by
    # k/length while attention can learn to single the outlier tokens out
    k = max(1, length // 8)
    return rng.choice(length, size=k, replace=False)


def generate_dataset(cfg: SyntheticConfig) -> list[Sample]:
    """Generate the synthetic corpus with teacher embeddings attached."""
    cfg.validate()
    dirs = _student_directions(cfg.d_in, cfg.seed)
    c_student = cfg.student_corruption_scale
    samples = []
    for i, (label, corruption) in enumerate(_assignments(cfg)):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, i, 1)))
        z = _latent(cfg, i)

        def tokens(length, latent, gain=1.0, local_rng=rng):
            return gain * latent + cfg.noise_sigma * local_rng.normal(size=(length, cfg.d_in))

        text = tokens(cfg.len_text, z)
        image = tokens(cfg.len_image, z)
        # the aligned (clip) channels carry the latent more strongly, so the
        # cross view has a workable agreement signal to compare
        clip_text = tokens(cfg.len_clip, z, cfg.clip_alignment_gain)
        if corruption == "cross-mismatch":
            partner = _latent(cfg, (i + 1) % cfg.n_samples)
            clip_image = tokens(cfg.len_clip, partner, cfg.clip_alignment_gain)
        else:
            clip_image = tokens(cfg.len_clip, z, cfg.clip_alignment_gain)
        if corruption == "text-fabrication":
            text[_planted_positions(rng, cfg.len_text)] += c_student * dirs["text"]
        elif corruption == "image-artifact":
            image[_planted_positions(rng, cfg.len_image)] += c_student * dirs["image"]

        teacher_seed = int(np.random.SeedSequence((cfg.seed, i, 2)).generate_state(1)[0])
        # the oracle's advantage is twofold: amplified corruption signal and
        # attenuated noise; either alone already meets the >= ratio contract
        teacher = synthetic_teacher_oracle(
            corruption,
            label,
            cfg.teacher_dim,
            cfg.noise_sigma / cfg.teacher_snr_ratio,
            teacher_seed,
            directions_seed=cfg.seed,
            class_scale=cfg.signal_strength,
            corruption_scale=cfg.teacher_corruption_scale,
        )
        samples.append(
            Sample(
                sample_id=f"s{i:05d}",
                label=label,
                corruption=corruption,
                text_seq=EmbeddedSequence(Tensor(text), "text-tokens"),
                image_seq=EmbeddedSequence(Tensor(image), "image-patches"),
                clip_text_seq=EmbeddedSequence(Tensor(clip_text), "clip-text"),
                clip_image_seq=EmbeddedSequence(Tensor(clip_image), "clip-image"),
                teacher=teacher,
            )
        )
    return samples


def split(dataset: list[Sample], fractions, seed: int) -> tuple[list[Sample], ...]:
    """Stratified-by-label split; deterministic, disjoint, exhaustive."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) < 2 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"fractions must be nonnegative and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts: list[list[Sample]] = [[] for _ in fractions]
    for label in (0, 1):
        indices = [i for i, s in enumerate(dataset) if s.label == label]
        rng.shuffle(indices)
        n = len(indices)
        bounds = [round(sum(fractions[: k + 1]) * n) for k in range(len(fractions))]
        start = 0
        for part, stop in zip(parts, bounds):
            part.extend(dataset[i] for i in indices[start:stop])
            start = stop
    return tuple(parts)


def attach_teacher(samples: list[Sample], embeddings: dict[str, TeacherEmbeddings]) -> None:
    """Attach loaded teacher embeddings in place; every sample must have an entry."""
    missing = [s.sample_id for s in samples if s.sample_id not in embeddings]
    if missing:
        raise ValidationError(f"teacher embeddings missing for samples: {missing[:5]}")
    for s in samples:
        s.teacher = embeddings[s.sample_id]


# ---------------------------------------------------------------------------
# feature files


def save_features_file(samples: list[Sample], path) -> None:
    """Write the four sequences of every sample as line-delimited records."""
    path = Path(path)
    d_in = {}
    for s in samples:
        for tag, seq in s.sequences().items():
            d_in.setdefault(tag, seq.dim)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format_version": 1, "d_in": d_in}) + "\n")
        for s in samples:
            for tag, seq in s.sequences().items():
                fh.write(
                    '{"sample_id": %s, "label": %d, "corruption": %s, "source_tag": %s, "tokens": %s}\n'
                    % (
                        json.dumps(s.sample_id),
                        s.label,
                        json.dumps(s.corruption),
                        json.dumps(tag),
                        floats2d_json(seq.tokens.values),
                    )
                )


def load_features_file(path) -> list[Sample]:
    """Load samples from a features file; teacher embeddings attach separately."""
    path = Path(path)
    if not Path(path).read_text("utf-8").strip():
        return []
    header, lines = read_record_lines(path)
    check_version = header.get("format_version")
    if check_version != 1:
        raise FormatError(f"{path}: unsupported format_version {check_version!r}")
    d_in = header.get("d_in")
    if not isinstance(d_in, dict):
        raise FormatError(f"{path}: header is missing the d_in map")

    order: list[str] = []
    meta: dict[str, tuple[int, str]] = {}
    seqs: dict[str, dict[str, EmbeddedSequence]] = {}
    for lineno, obj in lines:
        try:
            sid = str(obj["sample_id"])
            label = int(obj["label"])
            corruption = str(obj["corruption"])
            tag = str(obj["source_tag"])
            tokens = np.asarray(obj["tokens"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: line {lineno}: bad record ({exc})") from exc
        if tag not in SOURCE_TAGS:
            raise FormatError(f"{path}: line {lineno}: unknown source_tag {tag!r}")
        if tokens.ndim != 2 or tokens.shape[1] != d_in.get(tag):
            raise FormatError(
                f"{path}: sample {sid!r} has d_in {tokens.shape[1:]} for {tag}, "
                f"header declares {d_in.get(tag)}"
            )
        if sid not in meta:
            meta[sid] = (label, corruption)
            order.append(sid)
        elif meta[sid] != (label, corruption):
            raise FormatError(f"{path}: sample {sid!r} has conflicting label/corruption records")
        slot = seqs.setdefault(sid, {})
        if tag in slot:
            raise FormatError(f"{path}: duplicate {tag} record for sample {sid!r}")
        slot[tag] = EmbeddedSequence(Tensor(tokens), tag)

    samples = []
    for sid in order:
        missing = [tag for tag in SOURCE_TAGS if tag not in seqs[sid]]
        if missing:
            raise ValidationError(f"{path}: sample {sid!r} is missing sequences: {missing}")
        label, corruption = meta[sid]
        samples.append(
            Sample(
                sample_id=sid,
                label=label,
                corruption=corruption,
                text_seq=seqs[sid]["text-tokens"],
                image_seq=seqs[sid]["image-patches"],
                clip_text_seq=seqs[sid]["clip-text"],
                clip_image_seq=seqs[sid]["clip-image"],
            )
        )
    return samples
