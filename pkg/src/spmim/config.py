"""Strict sectioned key-value run configuration.

Unknown sections or keys are rejected, every value is type-checked, and
environment variables are never consulted. ``config_reference()``
generates the documented default file from the same schema the parser
uses, so the reference cannot drift from the implementation.

Stage entries are colon tuples ``out_channels:stride:expansion:repeats:
dropout_p`` separated by commas.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import AugmentPolicy, QualityThresholds
from .decoder import DecoderConfig
from .encoder import EncoderConfig, StageSpec
from .errors import ConfigError
from .training import FinetuneConfig, OptimizerConfig, PretrainConfig


@dataclass(frozen=True)
class _Key:
    parse: object
    default: str
    doc: str


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    if not text.strip():
        return ()
    return tuple(int(part) for part in text.split(","))


def _parse_stages(text: str) -> tuple[StageSpec, ...]:
    stages = []
    for chunk in text.split(","):
        parts = chunk.strip().split(":")
        if len(parts) != 5:
            raise ConfigError(
                f"stage {chunk.strip()!r} must be "
                "out_channels:stride:expansion:repeats:dropout_p"
            )
        stages.append(
            StageSpec(
                out_channels=int(parts[0]),
                stride=int(parts[1]),
                expansion=float(parts[2]),
                repeats=int(parts[3]),
                dropout_p=float(parts[4]),
            )
        )
    return tuple(stages)


_SCHEMA: dict[str, dict[str, _Key]] = {
    "encoder": {
        "stem_channels": _Key(int, "16", "stem convolution output channels"),
        "stem_stride": _Key(int, "2", "stem stride (1 or 2)"),
        "stages": _Key(
            _parse_stages,
            "24:2:4:2:0.05, 40:2:4:2:0.05, 80:2:4:2:0.1, 160:2:4:2:0.1",
            "bottleneck stages as out:stride:expansion:repeats:dropout",
        ),
        "dropout_site": _Key(
            str, "after_depthwise",
            "dropout placement: after_expand | after_depthwise | after_project",
        ),
        "channel_order": _Key(
            _parse_int_list, "",
            "optional permutation of stage width order (empty = identity)",
        ),
    },
    "decoder": {
        "channels": _Key(_parse_int_list, "64, 64, 64, 64, 64",
                         "decoder width per scale, shallowest first"),
    },
    "masking": {
        "ratio": _Key(float, "0.6", "fraction of patches hidden during pretraining"),
    },
    "optimizer": {
        "lr": _Key(float, "0.001", "base learning rate"),
        "beta1": _Key(float, "0.9", "first-moment decay"),
        "beta2": _Key(float, "0.999", "second-moment decay"),
        "eps": _Key(float, "1e-8", "denominator stabilizer"),
        "weight_decay": _Key(float, "0.01", "decoupled weight decay"),
        "delta": _Key(float, "0.1",
                      "projection threshold; <= 0 disables the projection"),
        "wd_ratio": _Key(float, "0.1", "weight-decay damping on projected tensors"),
    },
    "training": {
        "pretrain_epochs": _Key(int, "10", "pretraining epochs"),
        "finetune_epochs": _Key(int, "300", "fine-tuning epochs"),
        "batch_size": _Key(int, "8", "minibatch size"),
        "image_size": _Key(int, "224", "square training resolution"),
        "lr_schedule": _Key(str, "constant", "constant | cosine"),
        "normalize_targets": _Key(_parse_bool, "false",
                                  "standardize each target patch before the loss"),
        "num_classes": _Key(int, "2", "classifier classes (fine-tuning)"),
        "head_dropout": _Key(float, "0.2", "dropout before the classifier logits"),
        "freeze_encoder": _Key(_parse_bool, "false",
                               "train only the classifier head"),
    },
    "data": {
        "manifest": _Key(str, "data/manifest.tsv",
                         "line-delimited dataset manifest (path<TAB>label)"),
        "augment": _Key(_parse_bool, "true", "apply augmentation during training"),
        "crop_scale_min": _Key(float, "0.8", "minimum random crop scale"),
        "crop_scale_max": _Key(float, "1.0", "maximum random crop scale"),
        "hflip_p": _Key(float, "0.5", "horizontal flip probability"),
        "vflip_p": _Key(float, "0.5", "vertical flip probability"),
        "contrast_min": _Key(float, "0.8", "minimum contrast factor"),
        "contrast_max": _Key(float, "1.25", "maximum contrast factor"),
        "brightness_min": _Key(float, "0.8", "minimum brightness factor"),
        "brightness_max": _Key(float, "1.25", "maximum brightness factor"),
        "sharpen_max": _Key(float, "0.5", "maximum unsharp-mask amount"),
        "holdout_ratio": _Key(float, "0.8", "train fraction of the labeled split"),
        "qc_blur_min": _Key(float, "1e-4", "minimum Laplacian-response variance"),
        "qc_contrast_min": _Key(float, "0.05", "minimum luminance std"),
        "qc_illumination_lo": _Key(float, "0.1", "minimum mean luminance"),
        "qc_illumination_hi": _Key(float, "0.9", "maximum mean luminance"),
        "qc_artifact_max": _Key(float, "0.05", "maximum saturated-pixel fraction"),
    },
    "eval": {
        "folds": _Key(int, "5", "stratified cross-validation folds"),
        "gradcam_scale": _Key(int, "5", "encoder scale tapped for heatmaps"),
    },
    "output": {
        "dir": _Key(str, "runs/default", "artifact output directory"),
    },
}


@dataclass(frozen=True)
class DataConfig:
    manifest: str
    augment: bool
    policy: AugmentPolicy
    holdout_ratio: float
    quality: QualityThresholds


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig
    decoder: DecoderConfig
    mask_ratio: float
    optimizer: OptimizerConfig
    pretrain: PretrainConfig
    finetune: FinetuneConfig
    data: DataConfig
    image_size: int
    eval_folds: int
    gradcam_scale: int
    output_dir: str


def _parse_raw(text: str, source: str) -> dict[str, dict[str, str]]:
    raw: dict[str, dict[str, str]] = {}
    section: str | None = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            raw.setdefault(section, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside any section")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in _SCHEMA[section]:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r} in [{section}]")
        if key in raw[section]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[section][key] = value
    return raw


def _typed(raw: dict[str, dict[str, str]]) -> dict[str, dict]:
    values: dict[str, dict] = {}
    for section, keys in _SCHEMA.items():
        values[section] = {}
        for key, spec in keys.items():
            text = raw.get(section, {}).get(key, spec.default)
            try:
                values[section][key] = spec.parse(text)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(
                    f"[{section}] {key}: cannot parse {text!r} ({exc})"
                ) from exc
    return values


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = _typed(_parse_raw(text, source))
    enc = values["encoder"]
    order = enc["channel_order"] or None
    encoder = EncoderConfig(
        stem_channels=enc["stem_channels"],
        stem_stride=enc["stem_stride"],
        stages=enc["stages"],
        dropout_site=enc["dropout_site"],
        channel_order=order,
    )
    decoder = DecoderConfig(values["decoder"]["channels"])
    opt = OptimizerConfig(**values["optimizer"])
    train = values["training"]
    pretrain = PretrainConfig(
        epochs=train["pretrain_epochs"],
        batch_size=train["batch_size"],
        mask_ratio=values["masking"]["ratio"],
        lr_schedule=train["lr_schedule"],
        normalize_targets=train["normalize_targets"],
    )
    finetune = FinetuneConfig(
        epochs=train["finetune_epochs"],
        batch_size=train["batch_size"],
        num_classes=train["num_classes"],
        head_dropout=train["head_dropout"],
        freeze_encoder=train["freeze_encoder"],
        lr_schedule=train["lr_schedule"],
    )
    d = values["data"]
    policy = AugmentPolicy(
        crop_scale_min=d["crop_scale_min"],
        crop_scale_max=d["crop_scale_max"],
        hflip_p=d["hflip_p"],
        vflip_p=d["vflip_p"],
        contrast_range=(d["contrast_min"], d["contrast_max"]),
        brightness_range=(d["brightness_min"], d["brightness_max"]),
        sharpen_max=d["sharpen_max"],
    )
    quality = QualityThresholds(
        blur_min=d["qc_blur_min"],
        contrast_min=d["qc_contrast_min"],
        illumination_lo=d["qc_illumination_lo"],
        illumination_hi=d["qc_illumination_hi"],
        artifact_max=d["qc_artifact_max"],
    )
    data = DataConfig(
        manifest=d["manifest"], augment=d["augment"], policy=policy,
        holdout_ratio=d["holdout_ratio"], quality=quality,
    )
    return RunConfig(
        encoder=encoder,
        decoder=decoder,
        mask_ratio=values["masking"]["ratio"],
        optimizer=opt,
        pretrain=pretrain,
        finetune=finetune,
        data=data,
        image_size=train["image_size"],
        eval_folds=values["eval"]["folds"],
        gradcam_scale=values["eval"]["gradcam_scale"],
        output_dir=values["output"]["dir"],
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=path.name)


def config_reference() -> str:
    """The documented default configuration, generated from the schema."""
    lines = ["# Run configuration reference. Every key with its default value.",
             "# Unknown sections or keys are rejected.", ""]
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, spec in keys.items():
            lines.append(f"# {spec.doc}")
            lines.append(f"{key} = {spec.default}")
        lines.append("")
    return "\n".join(lines)
