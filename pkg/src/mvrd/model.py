"""Full student model: encoders -> calibration -> fusion -> losses.

The model owns three parameter groups (view encoders, calibrator, fusion) and
implements the ablation switches from TrainConfig:

* ``drop_text_view`` / ``drop_image_view``: the view feature is replaced by a
  constant zero vector right after encoding, removing it everywhere downstream
* ``no_feature_extractors_mode``: view features are raw mean-pooled input
  tokens (requires d_in == d)
* ``no_attention_mode``: every attention block degrades to mean pooling
  (encoders pool+project; fusion returns the pooled query itself)
* ``no_teacher`` / lambda == 0: the distillation subgraph is never recorded,
  so teacher values provably cannot influence gradients

Minibatches are processed as stacked (B, L, d_in) arrays, which requires
uniform sequence lengths per source across a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibratorParams, DistillConfig, calibrate_views, distill_losses
from .config import ABLATION_FLAGS, ConfigError, TrainConfig
from .diffcore import Parameter, Tensor, ValidationError, add, linear, mean, no_grad, scale
from .fusion import (
    FusionParams,
    LossBreakdown,
    build_view_set,
    classification_losses,
    cross_attention_fuse,
    pool_views,
    total_loss,
)
from .views import (
    SOURCE_TAGS,
    ViewEncoderParams,
    ViewFeatures,
    attend_and_project,
    co_attend_and_project,
    co_pool_and_project,
    pool_and_project,
)

VIEWS = ("text", "image", "cross")


class BatchedTeacher:
    """Per-view (B, d) teacher targets; always gradient-free."""

    def __init__(self, text: np.ndarray, image: np.ndarray, cross: np.ndarray):
        self.text = Tensor(text)
        self.image = Tensor(image)
        self.cross = Tensor(cross)

    def view(self, name: str) -> Tensor:
        return getattr(self, name)


@dataclass
class Batch:
    """One stacked minibatch of samples."""

    text: np.ndarray
    image: np.ndarray
    clip_text: np.ndarray
    clip_image: np.ndarray
    labels: np.ndarray
    teacher: BatchedTeacher | None

    @property
    def size(self) -> int:
        return len(self.labels)


def infer_d_in(samples) -> dict[str, int]:
    dims: dict[str, int] = {}
    for s in samples:
        for tag, seq in s.sequences().items():
            dims.setdefault(tag, seq.dim)
            if dims[tag] != seq.dim:
                raise ValidationError(
                    f"sample {s.sample_id!r}: {tag} has d_in={seq.dim}, expected {dims[tag]}"
                )
    if set(dims) != set(SOURCE_TAGS):
        raise ValidationError(f"dataset is missing sources: {set(SOURCE_TAGS) - set(dims)}")
    return dims


@dataclass
class StackedDataset:
    """Whole dataset pre-stacked so minibatches are cheap row slices."""

    text: np.ndarray
    image: np.ndarray
    clip_text: np.ndarray
    clip_image: np.ndarray
    labels: np.ndarray
    teacher: tuple[np.ndarray, np.ndarray, np.ndarray] | None

    @classmethod
    def from_samples(cls, samples, include_teacher: bool) -> "StackedDataset":
        if not samples:
            raise ValidationError("cannot stack an empty sample list")
        lengths = {
            tag: {s.sequences()[tag].length for s in samples} for tag in SOURCE_TAGS
        }
        ragged = {tag: sorted(ls) for tag, ls in lengths.items() if len(ls) > 1}
        if ragged:
            raise ValidationError(
                f"batched training requires uniform sequence lengths per source, got {ragged}"
            )
        stack = lambda tag: np.stack([s.sequences()[tag].tokens.values for s in samples])
        teacher = None
        if include_teacher:
            if any(s.teacher is None for s in samples):
                raise ValidationError("some samples have no teacher embeddings attached")
            teacher = tuple(
                np.stack([s.teacher.view(v).values for s in samples]) for v in VIEWS
            )
        return cls(
            text=stack("text-tokens"),
            image=stack("image-patches"),
            clip_text=stack("clip-text"),
            clip_image=stack("clip-image"),
            labels=np.array([s.label for s in samples], dtype=np.int64),
            teacher=teacher,
        )

    def batch(self, idx: np.ndarray) -> Batch:
        teacher = None
        if self.teacher is not None:
            teacher = BatchedTeacher(*(arr[idx] for arr in self.teacher))
        return Batch(
            text=self.text[idx],
            image=self.image[idx],
            clip_text=self.clip_text[idx],
            clip_image=self.clip_image[idx],
            labels=self.labels[idx],
            teacher=teacher,
        )


class Model:
    """The trainable student, built from a TrainConfig and the dataset's d_in map."""

    def __init__(self, cfg: TrainConfig, d_in: dict[str, int]):
        cfg.validate()
        if cfg.no_feature_extractors_mode:
            bad = {tag: dim for tag, dim in d_in.items() if dim != cfg.d}
            if bad:
                raise ConfigError(
                    f"no_feature_extractors_mode needs d_in == d == {cfg.d}, got {bad}"
                )
        self.cfg = cfg
        self.d_in = dict(d_in)
        self.encoder = ViewEncoderParams(d_in, cfg.d, cfg.encoder_heads, cfg.pooling, cfg.master_seed)
        self.calibrator = CalibratorParams(cfg.d, cfg.d_h, cfg.master_seed)
        self.fusion = FusionParams(cfg.d, cfg.heads, cfg.master_seed)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.calibrator.parameters() + self.fusion.parameters()

    # -- forward ------------------------------------------------------------

    def encode_batch(self, batch: Batch) -> ViewFeatures:
        cfg, enc = self.cfg, self.encoder
        text = Tensor(batch.text)
        image = Tensor(batch.image)
        clip_t = Tensor(batch.clip_text)
        clip_i = Tensor(batch.clip_image)
        if cfg.no_feature_extractors_mode:
            f_text = mean(text, axis=-2)
            f_image = mean(image, axis=-2)
            f_cross = scale(add(mean(clip_i, axis=-2), mean(clip_t, axis=-2)), 0.5)
        elif cfg.no_attention_mode:
            f_text = pool_and_project(text, enc.text_proj, enc.pooling)
            f_image = pool_and_project(image, enc.image_proj, enc.pooling)
            f_cross = co_pool_and_project(clip_i, clip_t, enc)
        else:
            f_text = attend_and_project(text, enc.text_attn, enc.text_proj, enc.pooling)
            f_image = attend_and_project(image, enc.image_attn, enc.image_proj, enc.pooling)
            f_cross = co_attend_and_project(clip_i, clip_t, enc)
        if cfg.drop_text_view:
            f_text = Tensor(np.zeros((batch.size, cfg.d)))
        if cfg.drop_image_view:
            f_image = Tensor(np.zeros((batch.size, cfg.d)))
        return ViewFeatures(f_text=f_text, f_image=f_image, f_cross=f_cross)

    def forward_loss(self, batch: Batch) -> LossBreakdown:
        cfg = self.cfg
        lam = cfg.lambda_effective
        views = self.encode_batch(batch)
        calibrated = calibrate_views(views, self.calibrator)
        dcfg = DistillConfig(cfg.tau, cfg.alpha, cfg.enabled_views)
        if lam > 0:
            if batch.teacher is None:
                raise ConfigError(
                    "distillation is enabled but the batch has no teacher embeddings"
                )
            distill = distill_losses(calibrated, batch.teacher, batch.labels, dcfg, self.calibrator)
        elif batch.teacher is not None:
            # report-only values: computed outside the tape so the teacher can
            # never touch the parameter trajectory
            with no_grad():
                distill = distill_losses(
                    calibrated, batch.teacher, batch.labels, dcfg, self.calibrator
                )
        else:
            distill = {}
        f_final = self.fuse(calibrated)
        loss_final, loss_branch = classification_losses(f_final, views, batch.labels, self.fusion)
        snapshot = {
            "lambda": cfg.lambda_,
            "lambda_effective": lam,
            "tau": cfg.tau,
            "alpha": cfg.alpha,
            "enabled_views": sorted(dcfg.enabled_views),
            "flags": {name: getattr(cfg, name) for name in ABLATION_FLAGS},
        }
        return total_loss(loss_final, loss_branch, distill, lam, snapshot)

    def fuse(self, calibrated) -> Tensor:
        pooled = pool_views(calibrated)
        if self.cfg.no_attention_mode:
            return pooled
        return cross_attention_fuse(pooled, build_view_set(calibrated), self.fusion)

    # -- inference ----------------------------------------------------------

    def predict_logits(
        self, samples, chunk_size: int = 256, use_calibration: bool = True
    ) -> np.ndarray:
        """Final-classifier logits, (N, 2); teacher embeddings are never needed."""
        out = []
        with no_grad():
            for start in range(0, len(samples), chunk_size):
                chunk = samples[start : start + chunk_size]
                data = StackedDataset.from_samples(chunk, include_teacher=False)
                batch = data.batch(np.arange(len(chunk)))
                views = self.encode_batch(batch)
                target = calibrate_views(views, self.calibrator) if use_calibration else views
                logits = linear(self.fuse(target), *self.fusion.final_head)
                out.append(logits.values)
        return np.concatenate(out, axis=0)

    def predict_labels(self, samples) -> np.ndarray:
        return self.predict_logits(samples).argmax(axis=-1)
