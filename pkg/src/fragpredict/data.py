"""Dataset manifests, patient-level splitting and the synthetic generator.

The generator draws a rotated ellipse head (dark nucleus, light acrosomal
cap, mid-gray background) so tone-based segmentation recovers it exactly;
per-class morphology distributions are blended by a correlation knob: at
1.0 each class keeps its own distribution, at 0.0 both classes sample the
shared midpoint distribution.  Every image derives its own RNG stream from
seed XOR sample index, so generation order or parallelism cannot change
pixel content.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ManifestError, MissingFilesError, SplitError
from .imaging import GrayImage, save_image

SCHEMA_VERSION = "1"
ASSAYS = ("AB", "TB", "AO", "CMA3", "TUNEL")
MODALITIES = ("brightfield", "phase_contrast")

# Tone palette chosen so the three scene parts quantize into distinct
# classes with the head (nucleus + cap) as the non-background region.
_NUCLEUS_TONE = 60.0
_BACKGROUND_TONE = 128.0
_CAP_TONE = 210.0

# Paired-stain intensity modes per label (bright-positive assays; flipped
# for dark-positive ones).
_STAIN_BRIGHT = 180.0
_STAIN_DARK = 60.0
_STAIN_STD = 8.0

LABEL_NAMES = {0: "unfragmented", 1: "fragmented"}


@dataclass
class SampleRecord:
    sample_id: str
    patient_id: str
    assay: str
    modality: str
    image_path: str
    stain_image_path: str | None = None
    stain_intensity: float | None = None
    label: int | None = None
    morph_truth: dict | None = None

    def validate(self) -> None:
        if not self.sample_id:
            raise ManifestError("record with empty sample_id")
        if not self.patient_id:
            raise ManifestError(f"record {self.sample_id!r}: empty patient_id")
        if self.assay not in ASSAYS:
            raise ManifestError(
                f"record {self.sample_id!r}: unknown assay {self.assay!r} "
                f"(expected one of {', '.join(ASSAYS)})"
            )
        if self.modality not in MODALITIES:
            raise ManifestError(
                f"record {self.sample_id!r}: unknown modality {self.modality!r} "
                f"(expected one of {', '.join(MODALITIES)})"
            )
        if self.label is not None and self.label not in (0, 1):
            raise ManifestError(
                f"record {self.sample_id!r}: label must be 0 or 1, got {self.label}"
            )
        if self.stain_intensity is not None and not (
            0.0 <= float(self.stain_intensity) <= 255.0
        ):
            raise ManifestError(
                f"record {self.sample_id!r}: stain_intensity outside [0, 255]"
            )


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    schema_version: str = SCHEMA_VERSION

    def patient_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.patient_id, None)
        return list(seen)

    def by_id(self) -> dict[str, SampleRecord]:
        return {r.sample_id: r for r in self.records}


def _record_from_dict(d: dict) -> SampleRecord:
    known = {f for f in SampleRecord.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise ManifestError(f"unknown record field(s): {sorted(unknown)}")
    missing = {"sample_id", "patient_id", "assay", "modality", "image_path"} - set(d)
    if missing:
        raise ManifestError(f"record missing required field(s): {sorted(missing)}")
    return SampleRecord(**d)


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest; verifies referenced images exist."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "records" not in doc:
        raise ManifestError(f"{path}: manifest must be an object with a 'records' array")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestError(
            f"{path}: schema_version {version!r} unsupported (expected {SCHEMA_VERSION!r})"
        )

    records = [_record_from_dict(r) for r in doc["records"]]
    seen: set[str] = set()
    for r in records:
        r.validate()
        if r.sample_id in seen:
            raise ManifestError(f"duplicate sample_id {r.sample_id!r}")
        seen.add(r.sample_id)

    if check_files:
        base = path.parent
        missing_paths = []
        for r in records:
            for p in (r.image_path, r.stain_image_path):
                if p is not None and not (base / p).is_file() and not Path(p).is_file():
                    missing_paths.append(p)
        if missing_paths:
            raise MissingFilesError(missing_paths)
    return DatasetManifest(records=records, schema_version=version)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc = {
        "schema_version": manifest.schema_version,
        "records": [
            {k: v for k, v in asdict(r).items() if v is not None}
            for r in manifest.records
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def resolve_image_path(manifest_path: str | Path, record_path: str) -> Path:
    """Record paths are relative to the manifest's directory, else absolute."""
    candidate = Path(manifest_path).parent / record_path
    return candidate if candidate.is_file() else Path(record_path)


def patient_split(
    manifest: DatasetManifest, val_fraction: float, seed: int
) -> tuple[list[str], list[str]]:
    """Assign whole patients to train/validation by seeded shuffle.

    Returns (train_sample_ids, val_sample_ids).  Warns when patient sizes
    force the realized validation fraction more than 10 percentage points
    from the request.
    """
    if not 0.0 < val_fraction < 1.0:
        raise SplitError(f"val_fraction must be in (0, 1), got {val_fraction}")
    patients = sorted(manifest.patient_ids())
    if len(patients) < 2:
        raise SplitError(f"patient-level split needs >= 2 patients, got {len(patients)}")

    by_patient: dict[str, list[str]] = {p: [] for p in patients}
    for r in manifest.records:
        by_patient[r.patient_id].append(r.sample_id)

    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    total = len(manifest.records)

    val_patients: list[str] = []
    val_count = 0
    for p in order[:-1]:  # always leave at least one patient for training
        if val_count / total >= val_fraction:
            break
        val_patients.append(p)
        val_count += len(by_patient[p])

    realized = val_count / total
    if abs(realized - val_fraction) > 0.10:
        warnings.warn(
            f"patient sizes force validation fraction {realized:.2f} "
            f"(requested {val_fraction:.2f})",
            stacklevel=2,
        )

    val_set = set(val_patients)
    train_ids = [r.sample_id for r in manifest.records if r.patient_id not in val_set]
    val_ids = [r.sample_id for r in manifest.records if r.patient_id in val_set]
    return train_ids, val_ids


# ---------------------------------------------------------------------------
# Synthetic image generation.
# ---------------------------------------------------------------------------


@dataclass
class ShapeDist:
    """Normal distributions over head geometry (lengths in pixels)."""

    major_axis_mean: float
    major_axis_std: float
    axis_ratio_mean: float
    axis_ratio_std: float
    cap_fraction_mean: float
    cap_fraction_std: float
    noise_sigma: float


@dataclass
class SynthConfig:
    counts: dict[str, int] = field(
        default_factory=lambda: {"unfragmented": 250, "fragmented": 250}
    )
    image_size: int = 64
    unfragmented: ShapeDist = field(
        default_factory=lambda: ShapeDist(22.0, 2.0, 1.2, 0.08, 0.55, 0.04, 4.0)
    )
    fragmented: ShapeDist = field(
        default_factory=lambda: ShapeDist(22.0, 2.0, 2.4, 0.15, 0.32, 0.04, 4.0)
    )
    label_correlation: float = 1.0  # 1: class owns its distribution, 0: shared
    seed: int = 0
    assay: str = "TUNEL"
    modality: str = "brightfield"
    num_patients: int = 10
    image_format: str = "pgm"

    def validate(self) -> None:
        if not 0.0 <= self.label_correlation <= 1.0:
            raise ConfigError(
                f"label_correlation must be in [0, 1], got {self.label_correlation}"
            )
        if set(self.counts) != set(LABEL_NAMES.values()):
            raise ConfigError(
                f"counts must have keys {sorted(LABEL_NAMES.values())}, got {sorted(self.counts)}"
            )
        if any(n < 0 for n in self.counts.values()):
            raise ConfigError("counts must be nonnegative")
        if self.assay not in ASSAYS:
            raise ConfigError(f"unknown assay {self.assay!r}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.num_patients < 1:
            raise ConfigError("num_patients must be >= 1")
        if self.image_format not in ("pgm", "png"):
            raise ConfigError(f"image_format must be 'pgm' or 'png', got {self.image_format!r}")
        for dist in (self.unfragmented, self.fragmented):
            max_semi = (dist.major_axis_mean + 4 * dist.major_axis_std) / 2
            if max_semi * 2 + 8 > self.image_size:
                raise ConfigError(
                    f"major axis up to {max_semi * 2:.0f}px cannot fit image_size "
                    f"{self.image_size} with margin"
                )
            if dist.axis_ratio_mean < 1.0:
                raise ConfigError("axis_ratio_mean must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        kwargs = dict(d)
        for key in ("unfragmented", "fragmented"):
            if key in kwargs and isinstance(kwargs[key], dict):
                kwargs[key] = ShapeDist(**kwargs[key])
        return cls(**kwargs)


def _blend(class_value: float, shared_value: float, rho: float) -> float:
    return rho * class_value + (1.0 - rho) * shared_value


def _draw_params(cfg: SynthConfig, label: int, rng: np.random.Generator) -> dict:
    own = cfg.fragmented if label == 1 else cfg.unfragmented
    other = cfg.unfragmented if label == 1 else cfg.fragmented
    rho = cfg.label_correlation

    def lerped(attr: str) -> float:
        shared = (getattr(cfg.unfragmented, attr) + getattr(cfg.fragmented, attr)) / 2
        return _blend(getattr(own, attr), shared, rho)

    major = rng.normal(lerped("major_axis_mean"), lerped("major_axis_std"))
    major = float(np.clip(major, 8.0, cfg.image_size - 8.0))
    ratio = rng.normal(lerped("axis_ratio_mean"), lerped("axis_ratio_std"))
    ratio = float(np.clip(ratio, 1.05, 6.0))
    cap = rng.normal(lerped("cap_fraction_mean"), lerped("cap_fraction_std"))
    cap = float(np.clip(cap, 0.05, 0.90))
    noise = _blend(own.noise_sigma, (cfg.unfragmented.noise_sigma + cfg.fragmented.noise_sigma) / 2, rho)
    return {
        "major_axis": major,
        "axis_ratio": ratio,
        "cap_fraction": cap,
        "orientation": float(rng.uniform(0.0, math.pi)),
        "center_dx": float(rng.uniform(-3.0, 3.0)),
        "center_dy": float(rng.uniform(-3.0, 3.0)),
        "noise_sigma": float(noise),
    }


def render_head(params: dict, image_size: int, rng: np.random.Generator) -> tuple[GrayImage, dict]:
    """Rasterize one head; returns the image and rasterized ground truth."""
    size = image_size
    a = params["major_axis"] / 2.0
    b = a / params["axis_ratio"]
    theta = params["orientation"]
    cx = (size - 1) / 2.0 + params["center_dx"]
    cy = (size - 1) / 2.0 + params["center_dy"]

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ct, st = math.cos(theta), math.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    head = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    n_head = int(head.sum())

    # The cap is the head slice beyond a chord perpendicular to the major
    # axis, placed at the pixel quantile that realizes the target fraction.
    u_head = u[head]
    cut = np.quantile(u_head, 1.0 - params["cap_fraction"])
    cap = head & (u >= cut)

    tones = np.full((size, size), _BACKGROUND_TONE)
    tones[head] = _NUCLEUS_TONE
    tones[cap] = _CAP_TONE
    tones += rng.normal(0.0, params["noise_sigma"], size=(size, size))
    img = GrayImage(np.clip(np.round(tones), 0, 255).astype(np.uint8))

    truth = dict(params)
    truth["head_area_px"] = n_head
    truth["cap_fraction_px"] = float(cap.sum() / n_head) if n_head else 0.0
    return img, truth


def synth_generate(cfg: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Write images and a manifest under `out_dir`; returns the manifest.

    Sample i uses RNG stream seed^i regardless of generation order.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    labels = [0] * cfg.counts["unfragmented"] + [1] * cfg.counts["fragmented"]
    bright_positive = cfg.assay in ("AO", "CMA3", "TUNEL")

    records = []
    for idx, label in enumerate(labels):
        rng = np.random.default_rng(cfg.seed ^ idx)
        params = _draw_params(cfg, label, rng)
        img, truth = render_head(params, cfg.image_size, rng)

        sample_id = f"S{idx:05d}"
        filename = f"{sample_id}.{cfg.image_format}"
        save_image(img, images_dir / filename)

        renders_bright = (label == 1) == bright_positive
        intensity = rng.normal(
            _STAIN_BRIGHT if renders_bright else _STAIN_DARK, _STAIN_STD
        )
        records.append(
            SampleRecord(
                sample_id=sample_id,
                patient_id=f"P{idx % cfg.num_patients:03d}",
                assay=cfg.assay,
                modality=cfg.modality,
                image_path=f"images/{filename}",
                stain_intensity=float(np.clip(intensity, 0.0, 255.0)),
                label=label,
                morph_truth=truth,
            )
        )

    manifest = DatasetManifest(records=records)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
