"""The two-branch ensemble: normalized hand-crafted features concatenated
with transformer features, classified by a small MLP head.

Training labels come from paired stain/fluorescence intensity: bright
readout marks fragmentation for AO/CMA3/TUNEL, dark readout for AB/TB.
Optimization is Adam on binary cross-entropy with logits; runs are
deterministic under a fixed seed (shuffle order, init and batching all
derive from it).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .autodiff import Var, no_grad
from .data import DatasetManifest, SampleRecord, resolve_image_path
from .errors import (
    ConfigError,
    SegmentationError,
    StateError,
    TrainingDataError,
    TrainingDivergedError,
)
from .imaging import GrayImage, load_image, mean_head_intensity, segment_head
from .morphometry import MorphFeatures, extract_features
from .weights import load_weights, save_weights

MORPH_DIM = 8
MLP_HIDDEN = (64, 32)

# Which assays read bright stain intensity as fragmentation-positive.
ASSAY_BRIGHT_POSITIVE = {
    "AB": False,
    "TB": False,
    "AO": True,
    "CMA3": True,
    "TUNEL": True,
}

BUNDLE_SCHEMA_VERSION = "1"
BACKBONE_WEIGHTS_FILE = "backbone.gcvt"
MLP_WEIGHTS_FILE = "mlp.gcvt"
MODEL_JSON_FILE = "model.json"


@dataclass
class Normalizer:
    """Per-feature z-score transform fitted on the training split only."""

    means: np.ndarray | None = None
    stds: np.ndarray | None = None

    @property
    def fitted(self) -> bool:
        return self.means is not None

    def fit(self, rows: np.ndarray) -> "Normalizer":
        rows = np.asarray(rows, dtype=np.float64)
        self.means = rows.mean(axis=0)
        self.stds = np.maximum(rows.std(axis=0), 1e-8)
        return self

    def transform(self, rows: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise StateError("normalizer is not fitted")
        return (np.asarray(rows, dtype=np.float64) - self.means) / self.stds

    def inverse_transform(self, rows: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise StateError("normalizer is not fitted")
        return np.asarray(rows, dtype=np.float64) * self.stds + self.means


@dataclass(frozen=True)
class LabelRule:
    """How stain intensity maps to the fragmented class."""

    assay: str
    threshold_source: str = "otsu"  # "otsu" | "fixed"
    threshold: float | None = None

    def __post_init__(self):
        if self.assay not in ASSAY_BRIGHT_POSITIVE:
            raise ConfigError(
                f"unknown assay {self.assay!r} "
                f"(expected one of {', '.join(ASSAY_BRIGHT_POSITIVE)})"
            )
        if self.threshold_source not in ("otsu", "fixed"):
            raise ConfigError(
                f"threshold_source must be 'otsu' or 'fixed', got {self.threshold_source!r}"
            )
        if self.threshold_source == "fixed" and self.threshold is None:
            raise ConfigError("threshold_source 'fixed' requires a threshold value")
        if self.threshold is not None and not 0.0 < self.threshold < 255.0:
            raise ConfigError(f"threshold must lie in (0, 255), got {self.threshold}")

    @property
    def bright_positive(self) -> bool:
        return ASSAY_BRIGHT_POSITIVE[self.assay]

    def with_threshold(self, threshold: float) -> "LabelRule":
        return LabelRule(self.assay, self.threshold_source, float(threshold))


def otsu_threshold(values: np.ndarray) -> float:
    """Single Otsu threshold over a [0, 255] intensity sample."""
    values = np.clip(np.round(np.asarray(values, dtype=np.float64)), 0, 255).astype(int)
    hist = np.bincount(values, minlength=256).astype(np.float64)
    w = np.cumsum(hist)
    s = np.cumsum(hist * np.arange(256, dtype=np.float64))
    n, s_total = w[-1], s[-1]
    t = np.arange(255)
    w0, w1 = w[t], n - w[t]
    s0 = s[t]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = np.where(w0 > 0, s0 / w0, 0.0)
        mu1 = np.where(w1 > 0, (s_total - s0) / w1, 0.0)
    score = w0 * w1 * (mu0 - mu1) ** 2
    best = int(np.argmax(score))
    return float(np.clip(best + 0.5, 0.5, 254.5))


def derive_label(intensity: float, rule: LabelRule) -> int:
    """1 (fragmented) or 0 by strict threshold comparison with assay polarity."""
    if rule.threshold is None:
        raise StateError("label rule has no resolved threshold")
    if rule.bright_positive:
        return 1 if intensity > rule.threshold else 0
    return 1 if intensity < rule.threshold else 0


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    freeze_backbone: bool = False
    patience: int = 6
    val_fraction: float = 0.2
    class_weighting: bool = False

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam hyperparameters")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EnsembleModel:
    backbone_config: bb.BackboneConfig
    backbone_params: bb.ParamStore
    mlp_params: bb.ParamStore
    normalizer: Normalizer

    @property
    def fused_dim(self) -> int:
        return self.backbone_config.feature_dim + MORPH_DIM


def init_mlp_params(feature_dim: int, seed: int) -> bb.ParamStore:
    """Classifier head: [feature_dim + 8] -> 64 -> 32 -> 1, GELU between."""
    rng = np.random.default_rng(seed)
    store = bb.ParamStore()
    widths = (feature_dim + MORPH_DIM, *MLP_HIDDEN, 1)
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        store.add(f"head.fc{i}.weight", bb._truncated_normal(rng, (fan_in, fan_out), bb.INIT_STD))
        store.add(f"head.fc{i}.bias", np.zeros(fan_out))
    return store


def init_ensemble(bcfg: bb.BackboneConfig, seed: int) -> EnsembleModel:
    return EnsembleModel(
        backbone_config=bcfg,
        backbone_params=bb.init_params(bcfg, seed),
        mlp_params=init_mlp_params(bcfg.feature_dim, seed + 1),
        normalizer=Normalizer(),
    )


def mlp_forward(fused: Var, mlp_params: bb.ParamStore) -> Var:
    """Fused vector(s) -> logit(s), shape (B,)."""
    x = fused
    n_layers = len(MLP_HIDDEN) + 1
    for i in range(n_layers):
        x = ad.matmul(x, mlp_params[f"head.fc{i}.weight"]) + mlp_params[f"head.fc{i}.bias"]
        if i < n_layers - 1:
            x = ad.gelu(x)
    return ad.reshape(x, (x.shape[0],))


def fuse(
    morph: MorphFeatures | np.ndarray, backbone_features: Var | np.ndarray, norm: Normalizer
) -> Var:
    """Z-scored morph features prepended to backbone features (CSV order)."""
    if not norm.fitted:
        raise StateError("normalizer is not fitted; train or load a model first")
    rows = np.asarray(
        morph.as_row() if isinstance(morph, MorphFeatures) else morph, dtype=np.float64
    )
    single = rows.ndim == 1
    rows = np.atleast_2d(rows)
    feats = ad.as_var(backbone_features)
    if len(feats.shape) == 1:
        feats = ad.reshape(feats, (1, feats.shape[0]))
    fused = ad.concat([ad.as_var(norm.transform(rows)), feats], axis=1)
    if single and fused.shape[0] == 1:
        return ad.reshape(fused, (fused.shape[1],))
    return fused


def binary_cross_entropy_logits(logits: Var, targets: np.ndarray, weights: np.ndarray | None = None) -> Var:
    """Mean BCE-with-logits: softplus(z) - y*z, numerically stable."""
    y = np.asarray(targets, dtype=np.float64)
    per_sample = ad.softplus(logits) - logits * y
    if weights is not None:
        per_sample = per_sample * np.asarray(weights, dtype=np.float64)
    return ad.mean(per_sample)


def predict_logit(model: EnsembleModel, img: GrayImage) -> Var:
    morph = extract_features(img)
    pixels = img.pixels.astype(np.float64) / 255.0
    feats = bb.forward(pixels[None, :, :], model.backbone_params, model.backbone_config)
    fused = fuse(morph, feats, model.normalizer)
    return mlp_forward(fused, model.mlp_params)


def predict(model: EnsembleModel, img: GrayImage) -> float:
    """Fragmentation probability in (0, 1) for one image."""
    from scipy.special import expit

    with no_grad():
        logit = predict_logit(model, img)
    return float(expit(logit.value[0]))


# ---------------------------------------------------------------------------
# Training.
# ---------------------------------------------------------------------------


class Adam:
    """Standard Adam over a fixed parameter list, float64 state."""

    def __init__(self, params: list[Var], tcfg: TrainConfig):
        self.params = params
        self.lr = tcfg.learning_rate
        self.b1, self.b2, self.eps = tcfg.beta1, tcfg.beta2, tcfg.adam_eps
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class SampleTensors:
    """Preprocessed training inputs for a set of records."""

    images: np.ndarray  # (N, H, W) in [0, 1]
    morph_rows: np.ndarray  # (N, 8) raw feature rows
    labels: np.ndarray  # (N,) in {0, 1}
    sample_ids: list[str]


def record_intensity(record: SampleRecord, manifest_path: str | Path) -> float:
    """Mean head intensity of the paired stain image (measured if not stored)."""
    if record.stain_intensity is not None:
        return float(record.stain_intensity)
    if record.stain_image_path is None:
        raise TrainingDataError(
            f"record {record.sample_id!r} has no label, stain intensity or stain image"
        )
    stain = load_image(resolve_image_path(manifest_path, record.stain_image_path))
    return mean_head_intensity(stain, segment_head(stain))


def resolve_labels(
    records: list[SampleRecord], rule: LabelRule, manifest_path: str | Path
) -> tuple[np.ndarray, LabelRule]:
    """Labels for `records`, resolving an Otsu threshold over their intensities.

    Records with an explicit label keep it; the rest are thresholded.  The
    returned rule carries the resolved numeric threshold.
    """
    resolved = rule
    if rule.threshold is None:
        intensities = [
            record_intensity(r, manifest_path) for r in records if r.label is None
        ]
        if intensities:
            resolved = rule.with_threshold(otsu_threshold(np.array(intensities)))
    labels = np.array(
        [
            r.label if r.label is not None else derive_label(record_intensity(r, manifest_path), resolved)
            for r in records
        ],
        dtype=np.int64,
    )
    return labels, resolved


def prepare_tensors(
    records: list[SampleRecord],
    labels: np.ndarray,
    manifest_path: str | Path,
    input_size: int,
    threads: int = 1,
) -> SampleTensors:
    """Load images and extract the morphometric branch for each record."""
    paths = [resolve_image_path(manifest_path, r.image_path) for r in records]

    def one(path) -> tuple[np.ndarray, np.ndarray]:
        img = load_image(path)
        if img.pixels.shape != (input_size, input_size):
            raise SegmentationError(
                f"{path}: image is {img.pixels.shape[1]}x{img.pixels.shape[0]}, "
                f"backbone expects {input_size}x{input_size}"
            )
        morph = extract_features(img)
        return img.pixels.astype(np.float64) / 255.0, np.array(morph.as_row())

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, paths))
    else:
        results = [one(p) for p in paths]

    return SampleTensors(
        images=np.stack([r[0] for r in results]),
        morph_rows=np.stack([r[1] for r in results]),
        labels=np.asarray(labels, dtype=np.int64),
        sample_ids=[r.sample_id for r in records],
    )


def _forward_batch(
    model: EnsembleModel, images: np.ndarray, morph_norm: np.ndarray, train_backbone: bool
) -> Var:
    if train_backbone:
        feats = bb.forward(images, model.backbone_params, model.backbone_config)
    else:
        with no_grad():
            feats = bb.forward(images, model.backbone_params, model.backbone_config)
        feats = feats.detach()
    fused = ad.concat([ad.as_var(morph_norm), feats], axis=1)
    return mlp_forward(fused, model.mlp_params)


def _dataset_loss_probs(
    model: EnsembleModel,
    tensors: SampleTensors,
    morph_norm: np.ndarray,
    batch_size: int,
) -> tuple[float, np.ndarray]:
    losses, probs = [], []
    with no_grad():
        for start in range(0, len(tensors.labels), batch_size):
            sl = slice(start, start + batch_size)
            logits = _forward_batch(model, tensors.images[sl], morph_norm[sl], False)
            z = logits.value
            y = tensors.labels[sl]
            losses.append(np.sum(np.logaddexp(0.0, z) - z * y))
            probs.append(1.0 / (1.0 + np.exp(-z)))
    total = float(np.sum(losses) / len(tensors.labels))
    return total, np.concatenate(probs)


def train_on_tensors(
    model: EnsembleModel,
    train: SampleTensors,
    val: SampleTensors,
    tcfg: TrainConfig,
) -> list[dict]:
    """Adam/BCE loop; restores the best-validation-loss weights on exit."""
    tcfg.validate()
    if len(np.unique(train.labels)) < 2:
        raise TrainingDataError(
            "training split contains a single class; cannot fit a classifier"
        )
    if tcfg.batch_size > len(train.labels):
        raise ConfigError(
            f"batch_size {tcfg.batch_size} exceeds training set size {len(train.labels)}"
        )

    model.normalizer.fit(train.morph_rows)
    train_norm = model.normalizer.transform(train.morph_rows)
    val_norm = model.normalizer.transform(val.morph_rows)

    weights = None
    if tcfg.class_weighting:
        counts = np.bincount(train.labels, minlength=2).astype(np.float64)
        inv = len(train.labels) / (2.0 * np.maximum(counts, 1.0))
        weights = inv[train.labels]

    trainable = [v for _, v in model.mlp_params.items()]
    if not tcfg.freeze_backbone:
        trainable += [v for _, v in model.backbone_params.items()]
    optimizer = Adam(trainable, tcfg)
    shuffle_rng = np.random.default_rng(tcfg.seed)

    history: list[dict] = []
    best_val = np.inf
    best_state: tuple[dict, dict] | None = None
    stale = 0
    n = len(train.labels)
    for epoch in range(1, tcfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            model.mlp_params.zero_grad()
            model.backbone_params.zero_grad()
            logits = _forward_batch(
                model, train.images[idx], train_norm[idx], not tcfg.freeze_backbone
            )
            batch_w = weights[idx] if weights is not None else None
            loss = binary_cross_entropy_logits(logits, train.labels[idx], batch_w)
            if not np.isfinite(loss.value):
                raise TrainingDivergedError(epoch)
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.value) * len(idx)

        val_loss, val_probs = _dataset_loss_probs(model, val, val_norm, tcfg.batch_size)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch)
        val_acc = float(np.mean((val_probs > 0.5).astype(np.int64) == val.labels))
        history.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / n,
                "val_loss": val_loss,
                "val_accuracy": val_acc,
            }
        )
        if val_loss < best_val:
            best_val = val_loss
            best_state = (model.backbone_params.snapshot(), model.mlp_params.snapshot())
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break

    if best_state is not None:
        model.backbone_params.load_values(best_state[0])
        model.mlp_params.load_values(best_state[1])
    return history


def train(
    manifest: DatasetManifest,
    rule: LabelRule,
    tcfg: TrainConfig,
    bcfg: bb.BackboneConfig,
    manifest_path: str | Path = ".",
    threads: int = 1,
) -> tuple[EnsembleModel, list[dict], LabelRule]:
    """Full pipeline: patient split, label derivation, feature prep, fit.

    Returns (model, history, rule-with-resolved-threshold).
    """
    from .data import patient_split

    tcfg.validate()
    train_ids, val_ids = patient_split(manifest, tcfg.val_fraction, tcfg.seed)
    by_id = manifest.by_id()
    train_records = [by_id[i] for i in train_ids]
    val_records = [by_id[i] for i in val_ids]
    if not val_records:
        raise TrainingDataError("validation split is empty")

    train_labels, resolved_rule = resolve_labels(train_records, rule, manifest_path)
    val_labels, _ = resolve_labels(val_records, resolved_rule, manifest_path)
    if len(np.unique(train_labels)) < 2:
        raise TrainingDataError("training split contains a single class")

    train_tensors = prepare_tensors(
        train_records, train_labels, manifest_path, bcfg.input_size, threads
    )
    val_tensors = prepare_tensors(
        val_records, val_labels, manifest_path, bcfg.input_size, threads
    )

    model = init_ensemble(bcfg, tcfg.seed)
    history = train_on_tensors(model, train_tensors, val_tensors, tcfg)
    return model, history, resolved_rule


# ---------------------------------------------------------------------------
# Model bundle persistence.
# ---------------------------------------------------------------------------


def save_bundle(
    out_dir: str | Path,
    model: EnsembleModel,
    rule: LabelRule,
    tcfg: TrainConfig,
) -> None:
    """Write backbone/MLP weight files plus a JSON sidecar with configs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_weights(model.backbone_params, out_dir / BACKBONE_WEIGHTS_FILE)
    save_weights(model.mlp_params, out_dir / MLP_WEIGHTS_FILE)
    doc = {
        "schema_version": BUNDLE_SCHEMA_VERSION,
        "means": list(map(float, model.normalizer.means)),
        "stds": list(map(float, model.normalizer.stds)),
        "label_rule": {
            "assay": rule.assay,
            "threshold_source": rule.threshold_source,
            "threshold": rule.threshold,
        },
        "backbone_config": model.backbone_config.to_dict(),
        "train_config": tcfg.to_dict(),
    }
    (out_dir / MODEL_JSON_FILE).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_bundle(bundle_dir: str | Path) -> tuple[EnsembleModel, LabelRule, TrainConfig]:
    bundle_dir = Path(bundle_dir)
    doc = json.loads((bundle_dir / MODEL_JSON_FILE).read_text(encoding="utf-8"))
    if doc.get("schema_version") != BUNDLE_SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported bundle schema_version {doc.get('schema_version')!r}"
        )
    bcfg = bb.BackboneConfig.from_dict(doc["backbone_config"])
    model = EnsembleModel(
        backbone_config=bcfg,
        backbone_params=load_weights(bundle_dir / BACKBONE_WEIGHTS_FILE),
        mlp_params=load_weights(bundle_dir / MLP_WEIGHTS_FILE),
        normalizer=Normalizer(
            means=np.array(doc["means"], dtype=np.float64),
            stds=np.array(doc["stds"], dtype=np.float64),
        ),
    )
    rule_doc = doc["label_rule"]
    rule = LabelRule(
        assay=rule_doc["assay"],
        threshold_source=rule_doc["threshold_source"],
        threshold=rule_doc["threshold"],
    )
    tcfg = TrainConfig.from_dict(doc["train_config"])
    return model, rule, tcfg
