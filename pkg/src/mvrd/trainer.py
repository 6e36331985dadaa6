"""Training loop, runners, and persistence.

Everything here is deterministic under (config, master seed, dataset): the
shuffle stream, parameter init, and optimizer state contain no other sources
of randomness, so repeated runs produce bit-identical metrics.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, TrainConfig
from .datasynth import Sample
from .diffcore import (
    ContractError,
    Parameter,
    ParameterError,
    ValidationError,
    backward,
    zero_grads,
)
from .fileio import FormatError
from .metrics import Metrics, WelchResult, compute_metrics, welch_ttest
from .model import Model, StackedDataset, infer_d_in
from .teacher import TeacherEmbeddings, fallback_embed

VIEWS = ("text", "image", "cross")

CHECKPOINT_MAGIC = b"MVRD-CKPT\n"
CHECKPOINT_VERSION = 1


class Adam:
    """Adaptive-moment optimizer; a zero-gradient step from fresh state is a no-op."""

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {p.name: np.zeros(p.tensor.shape) for p in self.params}
        self._v = {p.name: np.zeros(p.tensor.shape) for p in self.params}

    def zero_grad(self) -> None:
        zero_grads(self.params)

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p in self.params:
            g = p.tensor.grad
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.tensor.values -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class RunReport:
    """Serializable record of one training run."""

    config: dict
    seed: int
    epoch_losses: list[dict]
    metrics: dict | None
    wall_time_s: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "seed": self.seed,
                "epoch_losses": self.epoch_losses,
                "metrics": self.metrics,
                "wall_time_s": self.wall_time_s,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        obj = json.loads(text)
        return cls(
            config=obj["config"],
            seed=obj["seed"],
            epoch_losses=obj["epoch_losses"],
            metrics=obj["metrics"],
            wall_time_s=obj["wall_time_s"],
        )


def replace_teacher_with_content_embeddings(samples: list[Sample], d: int) -> list[Sample]:
    """Prompt-less teacher: embed a digest of each sample's raw content instead
    of view-targeted reasoning. Deterministic; strips all planted teacher
    structure while staying content-dependent."""
    if d < 8:
        raise ConfigError(f"content embeddings need d >= 8, got {d}")

    def render(arrays) -> str:
        pooled = np.concatenate([a.mean(axis=0) for a in arrays])
        return " ".join(format(v, ".3f") for v in pooled)

    out = []
    for s in samples:
        content = {
            "text": render([s.text_seq.tokens.values]),
            "image": render([s.image_seq.tokens.values]),
            "cross": render([s.clip_text_seq.tokens.values, s.clip_image_seq.tokens.values]),
        }
        teacher = TeacherEmbeddings(
            text=fallback_embed(content["text"], d),
            image=fallback_embed(content["image"], d),
            cross=fallback_embed(content["cross"], d),
        )
        out.append(
            Sample(
                sample_id=s.sample_id,
                label=s.label,
                corruption=s.corruption,
                text_seq=s.text_seq,
                image_seq=s.image_seq,
                clip_text_seq=s.clip_text_seq,
                clip_image_seq=s.clip_image_seq,
                teacher=teacher,
            )
        )
    return out


def train(
    cfg: TrainConfig, dataset: list[Sample], eval_dataset: list[Sample] | None = None
) -> tuple[Model, RunReport]:
    """Mini-batch Adam training of the full model on one dataset."""
    cfg.validate()
    if not dataset:
        raise ValidationError("training set is empty")
    if cfg.no_reasoning_prompts_mode:
        dataset = replace_teacher_with_content_embeddings(dataset, cfg.d)
    has_teacher = all(s.teacher is not None for s in dataset)
    if cfg.lambda_effective > 0 and not has_teacher:
        raise ConfigError(
            "dataset lacks teacher embeddings; attach a teacher file, set no_teacher, "
            "or train with lambda = 0"
        )

    start = time.perf_counter()
    model = Model(cfg, infer_d_in(dataset))
    optimizer = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    data = StackedDataset.from_samples(dataset, include_teacher=has_teacher)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((cfg.master_seed, 17)))
    n = len(dataset)

    epoch_losses: list[dict] = []
    for _ in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        sums: dict[str, float] = {}
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            batch = data.batch(perm[lo : lo + cfg.batch_size])
            optimizer.zero_grad()
            breakdown = model.forward_loss(batch)
            backward(breakdown.graph)
            optimizer.step()
            if cfg.debug_checks:
                err_c, err_total = breakdown.identity_errors()
                if err_c > 1e-12 or err_total > 1e-12:
                    raise ContractError(
                        f"loss identities violated: |L_C err|={err_c:.3e}, |total err|={err_total:.3e}"
                    )
            record = breakdown.to_record()
            for key in ("final", "branch", "classification", "total"):
                sums[key] = sums.get(key, 0.0) + record[key]
            for view, value in record["distill"].items():
                sums[f"distill_{view}"] = sums.get(f"distill_{view}", 0.0) + value
            n_batches += 1
        epoch_losses.append({k: v / n_batches for k, v in sums.items()})

    metrics = evaluate(model, eval_dataset) if eval_dataset else None
    report = RunReport(
        config=cfg.snapshot(),
        seed=cfg.master_seed,
        epoch_losses=epoch_losses,
        metrics=metrics.as_dict() if metrics else None,
        wall_time_s=time.perf_counter() - start,
    )
    return model, report


def evaluate(model: Model, test_set: list[Sample]) -> Metrics:
    """Accuracy/F1/AUC on a held-out set; never touches teacher embeddings."""
    if not test_set:
        raise ValidationError("evaluation set is empty")
    logits = model.predict_logits(test_set)
    labels = np.array([s.label for s in test_set], dtype=np.int64)
    return compute_metrics(labels, logits)


# ---------------------------------------------------------------------------
# runners


@dataclass
class VariantResult:
    name: str
    mean: dict[str, float]
    sd: dict[str, float]
    per_seed: list[dict[str, float]] = field(default_factory=list)


ABLATION_VARIANTS: tuple[tuple[str, dict], ...] = (
    ("full", {}),
    ("drop_L_text", {"drop_L_text": True}),
    ("drop_L_image", {"drop_L_image": True}),
    ("drop_L_cross", {"drop_L_cross": True}),
    ("drop_text_view", {"drop_text_view": True}),
    ("drop_image_view", {"drop_image_view": True}),
    ("no_reasoning_prompts", {"no_reasoning_prompts_mode": True}),
    ("no_teacher", {"no_teacher": True}),
    ("no_feature_extractors", {"no_feature_extractors_mode": True}),
    ("no_attention", {"no_attention_mode": True}),
)


def _summarize(per_seed: list[Metrics]) -> tuple[dict, dict]:
    keys = per_seed[0].as_dict().keys()
    arrays = {k: np.array([m.as_dict()[k] for m in per_seed]) for k in keys}
    mean = {k: float(v.mean()) for k, v in arrays.items()}
    sd = {k: float(v.std(ddof=1)) if len(v) > 1 else 0.0 for k, v in arrays.items()}
    return mean, sd


def _seeded_runs(
    cfg: TrainConfig, train_set, test_set, n_seeds: int, **flag_overrides
) -> list[Metrics]:
    results = []
    for k in range(n_seeds):
        run_cfg = cfg.replace(master_seed=cfg.master_seed + k, **flag_overrides)
        _, report = train(run_cfg, train_set, eval_dataset=test_set)
        results.append(Metrics(**report.metrics))
    return results


def ablation_suite(
    cfg: TrainConfig, train_set, test_set, n_seeds: int = 5
) -> list[VariantResult]:
    """Full model plus every single-mechanism removal, mean +/- sd over seeds."""
    if n_seeds < 3:
        raise ParameterError(f"ablation needs n_seeds >= 3, got {n_seeds}")
    rows = []
    for name, flags in ABLATION_VARIANTS:
        per_seed = _seeded_runs(cfg, train_set, test_set, n_seeds, **flags)
        mean, sd = _summarize(per_seed)
        rows.append(VariantResult(name, mean, sd, [m.as_dict() for m in per_seed]))
    return rows


SWEEP_AXES = {"lambda": "lambda_", "tau": "tau", "alpha": "alpha", "heads": "heads"}


def sweep(
    cfg: TrainConfig, axis: str, values, train_set, test_set, n_seeds: int = 3
) -> list[VariantResult]:
    """Metric curve along one hyperparameter axis."""
    if axis not in SWEEP_AXES:
        raise ParameterError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    if axis == "heads":
        bad = [v for v in values if cfg.d % int(v) != 0]
        if bad:
            raise ConfigError(f"head counts {bad} do not divide d={cfg.d}")
    field_name = SWEEP_AXES[axis]
    rows = []
    for value in values:
        value = int(value) if axis == "heads" else float(value)
        per_seed = _seeded_runs(cfg, train_set, test_set, n_seeds, **{field_name: value})
        mean, sd = _summarize(per_seed)
        rows.append(
            VariantResult(f"{axis}={value}", mean, sd, [m.as_dict() for m in per_seed])
        )
    return rows


def sweep_chart(rows: list[VariantResult], axis: str, path) -> bool:
    """Render the sweep as a chart file; returns False when matplotlib is absent."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    values = [row.name.split("=", 1)[1] for row in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("accuracy", "f1_fake", "f1_real", "auc"):
        means = [row.mean[key] for row in rows]
        sds = [row.sd[key] for row in rows]
        ax.errorbar(values, means, yerr=sds, marker="o", capsize=3, label=key)
    ax.set_xlabel(axis)
    ax.set_ylabel("metric")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def compare_runs(runs_a, runs_b) -> WelchResult:
    """Significance of a metric difference across seeded retrainings."""
    return welch_ttest(runs_a, runs_b)


# ---------------------------------------------------------------------------
# checkpoints


def _layout_hash(params: list[Parameter]) -> str:
    layout = [[p.name, list(p.tensor.shape)] for p in params]
    return hashlib.sha256(json.dumps(layout).encode()).hexdigest()


def save_checkpoint(model: Model, path) -> None:
    """Binary checkpoint: JSON header, then per-parameter meta + raw float64."""
    params = model.parameters()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "d": model.cfg.d,
        "h": model.cfg.heads,
        "layout_hash": _layout_hash(params),
        "train_config": model.cfg.snapshot(),
        "d_in": model.d_in,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header).encode() + b"\n")
        for p in params:
            meta = {"name": p.name, "shape": list(p.tensor.shape)}
            fh.write(json.dumps(meta).encode() + b"\n")
            fh.write(np.ascontiguousarray(p.tensor.values, dtype="<f8").tobytes())
            fh.write(b"\n")


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint fully before returning; truncation never partially loads."""
    blob = open(path, "rb").read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint file")
    cursor = len(CHECKPOINT_MAGIC)

    def read_line() -> bytes:
        nonlocal cursor
        end = blob.find(b"\n", cursor)
        if end < 0:
            raise FormatError(f"{path}: truncated checkpoint")
        line = blob[cursor:end]
        cursor = end + 1
        return line

    try:
        header = json.loads(read_line())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad checkpoint header ({exc})") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint format_version {header.get('format_version')!r}"
        )
    arrays: dict[str, np.ndarray] = {}
    while cursor < len(blob):
        meta = json.loads(read_line())
        shape = tuple(meta["shape"])
        nbytes = int(np.prod(shape)) * 8
        if cursor + nbytes + 1 > len(blob):
            raise FormatError(f"{path}: truncated checkpoint at parameter {meta['name']!r}")
        arrays[meta["name"]] = np.frombuffer(
            blob[cursor : cursor + nbytes], dtype="<f8"
        ).reshape(shape)
        cursor += nbytes + 1
    return header, arrays


def restore_into_model(model: Model, path) -> None:
    """Load parameter values into an existing model; shapes must match exactly."""
    header, arrays = load_checkpoint(path)
    params = model.parameters()
    if header["layout_hash"] != _layout_hash(params):
        for p in params:
            if p.name not in arrays:
                raise FormatError(f"checkpoint is missing parameter {p.name!r}")
            if tuple(arrays[p.name].shape) != p.tensor.shape:
                raise FormatError(
                    f"parameter {p.name!r}: checkpoint shape {arrays[p.name].shape} "
                    f"does not match model shape {p.tensor.shape}"
                )
        raise FormatError("checkpoint layout differs from the model's parameter layout")
    for p in params:
        p.tensor.values[...] = arrays[p.name]


def load_model(path) -> Model:
    """Rebuild the model architecture recorded in a checkpoint and load it."""
    header, arrays = load_checkpoint(path)
    cfg = TrainConfig(**header["train_config"]).validate()
    model = Model(cfg, {str(k): int(v) for k, v in header["d_in"].items()})
    for p in model.parameters():
        if p.name not in arrays:
            raise FormatError(f"checkpoint is missing parameter {p.name!r}")
        if tuple(arrays[p.name].shape) != p.tensor.shape:
            raise FormatError(
                f"parameter {p.name!r}: checkpoint shape {arrays[p.name].shape} "
                f"does not match model shape {p.tensor.shape}"
            )
        p.tensor.values[...] = arrays[p.name]
    return model
