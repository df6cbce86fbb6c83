"""On-disk dataset format, sample loading, pseudo-label persistence, and run
configuration.

Dataset layout (one directory per split):
  root/
    rgb/<id>.png         8-bit 3-channel
    depth/<id>.png       16-bit single-channel, millimeters
    label/<id>.png       8-bit, 0 = background, 255 = foreground (optional)
    sn/<id>.png          optional cached normal encoding, 8-bit 3-channel
    intrinsics.json      pinhole parameters shared by the split
    manifest.json        sample ids, split role, generating seed

Iteration follows the manifest order, never filesystem enumeration. Splits
with role "target-train" withhold labels: any label access raises, which is
what keeps training honest about never touching target ground truth.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry
from .errors import ConfigError, DataError, LabelAccessError

RGB_DIR = "rgb"
DEPTH_DIR = "depth"
LABEL_DIR = "label"
SN_DIR = "sn"
MANIFEST_NAME = "manifest.json"
INTRINSICS_NAME = "intrinsics.json"

DEPTH_SCALE = 1000.0  # millimeters per meter

ROLES = ("source-train", "target-train", "target-eval")


# --------------------------------------------------------------------------
# image file round trips


def save_rgb(path: str | Path, rgb: np.ndarray) -> None:
    """Write (H, W, 3) floats in [0, 1] as an 8-bit PNG."""
    arr = np.rint(np.clip(np.asarray(rgb), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_rgb(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_depth(path: str | Path, depth_m: np.ndarray) -> None:
    """Write metric depth as 16-bit integer millimeters; 0 = missing."""
    mm = np.rint(np.clip(np.asarray(depth_m), 0.0, 65.535) * DEPTH_SCALE).astype(np.uint16)
    Image.fromarray(mm).save(path)  # uint16 infers 16-bit single-channel mode


def load_depth(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"depth file {path} is not single-channel")
    return arr / DEPTH_SCALE


def save_label(path: str | Path, label: np.ndarray) -> None:
    """Write a {0, 1} mask as a {0, 255} 8-bit PNG."""
    label = np.asarray(label)
    if not np.isin(label, (0, 1)).all():
        raise DataError("label mask must contain only 0/1 values")
    Image.fromarray((label.astype(np.uint8) * 255), mode="L").save(path)


def load_label(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise DataError(f"label file {path} is not single-channel")
    if not np.isin(arr, (0, 255)).all():
        raise DataError(f"label file {path} has values outside {{0, 255}}")
    return (arr == 255).astype(np.uint8)


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    """Boolean mask to {0, 255} PNG (ignore masks, binary predictions)."""
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if not np.isin(arr, (0, 255)).all():
        raise DataError(f"mask file {path} has values outside {{0, 255}}")
    return arr == 255


def save_gray(path: str | Path, values: np.ndarray) -> None:
    """Write (H, W) floats in [0, 1] as an 8-bit grayscale PNG."""
    arr = np.rint(np.clip(np.asarray(values), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def save_sn_cache(path: str | Path, sn: geometry.SurfaceNormalImage) -> None:
    Image.fromarray(geometry.encode_to_uint8(sn), mode="RGB").save(path)


def load_sn_cache(path: str | Path) -> geometry.SurfaceNormalImage:
    return geometry.decode_from_uint8(np.asarray(Image.open(path).convert("RGB")))


# --------------------------------------------------------------------------
# samples and dataset layout


@dataclasses.dataclass
class Sample:
    """One scene: image, depth, intrinsics, optional label and normals."""

    sample_id: str
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    depth: np.ndarray | None  # (H, W) meters, 0 = missing
    intrinsics: geometry.CameraIntrinsics
    label: np.ndarray | None = None  # (H, W) uint8 in {0, 1}
    normals: geometry.SurfaceNormalImage | None = None
    regions: np.ndarray | None = None  # generator diagnostic, never on disk


class DatasetLayout:
    """A split directory described by its manifest."""

    def __init__(self, root: str | Path, role: str, ids: list[str], seed: int, has_labels: bool):
        if role not in ROLES:
            raise ConfigError(f"unknown split role {role!r}, expected one of {ROLES}")
        self.root = Path(root)
        self.role = role
        self.ids = list(ids)
        self.seed = seed
        self.has_labels = has_labels

    @property
    def labels_withheld(self) -> bool:
        return self.role == "target-train" or not self.has_labels

    def rgb_path(self, sample_id: str) -> Path:
        return self.root / RGB_DIR / f"{sample_id}.png"

    def depth_path(self, sample_id: str) -> Path:
        return self.root / DEPTH_DIR / f"{sample_id}.png"

    def label_path(self, sample_id: str) -> Path:
        return self.root / LABEL_DIR / f"{sample_id}.png"

    def sn_path(self, sample_id: str) -> Path:
        return self.root / SN_DIR / f"{sample_id}.png"

    def intrinsics_path(self) -> Path:
        return self.root / INTRINSICS_NAME

    def write_manifest(self) -> None:
        manifest = {
            "samples": self.ids,
            "role": self.role,
            "seed": self.seed,
            "labels": self.has_labels,
        }
        (self.root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def open(cls, root: str | Path, validate: bool = True) -> "DatasetLayout":
        root = Path(root)
        manifest_path = root / MANIFEST_NAME
        if not manifest_path.exists():
            raise DataError(f"missing manifest: {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        layout = cls(
            root=root,
            role=manifest["role"],
            ids=manifest["samples"],
            seed=int(manifest.get("seed", 0)),
            has_labels=bool(manifest.get("labels", True)),
        )
        if validate:
            layout.validate_files()
        return layout

    def validate_files(self) -> None:
        if not self.intrinsics_path().exists():
            raise DataError(f"missing file: {self.intrinsics_path()}")
        for sample_id in self.ids:
            for path in (self.rgb_path(sample_id), self.depth_path(sample_id)):
                if not path.exists():
                    raise DataError(f"missing file: {path}")
            if self.has_labels and not self.label_path(sample_id).exists():
                raise DataError(f"missing file: {self.label_path(sample_id)}")


def load_sample(
    layout: DatasetLayout,
    sample_id: str,
    need_normals: bool = False,
    want_label: bool = True,
    write_cache: bool = False,
) -> Sample:
    """Load one sample; derives normals from depth when no cache exists.

    Label access on a labels-withheld split raises LabelAccessError; callers
    that train on target data must pass want_label=False.
    """
    if sample_id not in layout.ids:
        raise DataError(f"sample {sample_id!r} not in manifest of {layout.root}")
    intrinsics = geometry.CameraIntrinsics.load(layout.intrinsics_path())
    rgb = load_rgb(_require(layout.rgb_path(sample_id)))
    depth = load_depth(_require(layout.depth_path(sample_id)))

    label = None
    if want_label:
        if layout.labels_withheld:
            raise LabelAccessError(
                f"labels of split {layout.role!r} at {layout.root} are withheld"
            )
        label = load_label(_require(layout.label_path(sample_id)))

    normals = None
    if need_normals:
        cache = layout.sn_path(sample_id)
        if cache.exists():
            normals = load_sn_cache(cache)
        else:
            normals = geometry.depth_to_normals(depth, intrinsics)
            if write_cache:
                cache.parent.mkdir(parents=True, exist_ok=True)
                save_sn_cache(cache, normals)

    return Sample(
        sample_id=sample_id,
        rgb=rgb,
        depth=depth,
        intrinsics=intrinsics,
        label=label,
        normals=normals,
    )


def _require(path: Path) -> Path:
    if not path.exists():
        raise DataError(f"missing file: {path}")
    return path


# --------------------------------------------------------------------------
# pseudo labels


@dataclasses.dataclass
class PseudoLabelRecord:
    """Target-domain label guess with a low-confidence ignore mask."""

    label: np.ndarray  # (H, W) uint8 in {0, 1}
    ignore: np.ndarray  # (H, W) bool, True = excluded from every loss
    round_index: int  # round whose model produced the record
    alpha: float


def pseudo_dir(run_dir: str | Path, consumed_in_round: int) -> Path:
    """Store location for the records consumed by a given round."""
    return Path(run_dir) / "pseudo" / f"round{consumed_in_round}"


def save_pseudo_labels(directory: str | Path, records: dict[str, PseudoLabelRecord]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    alphas = {rec.alpha for rec in records.values()}
    rounds = {rec.round_index for rec in records.values()}
    if len(alphas) > 1 or len(rounds) > 1:
        raise ConfigError("pseudo-label records in one store must share alpha and round")
    for sample_id, rec in records.items():
        save_label(directory / f"{sample_id}_label.png", rec.label)
        save_mask(directory / f"{sample_id}_ignore.png", rec.ignore)
    meta = {
        "alpha": float(next(iter(alphas))) if alphas else None,
        "round_index": int(next(iter(rounds))) if rounds else None,
        "ids": sorted(records.keys()),
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_pseudo_labels(
    directory: str | Path, expect_alpha: float | None = None
) -> dict[str, PseudoLabelRecord]:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise DataError(f"missing pseudo-label store: {meta_path}")
    meta = json.loads(meta_path.read_text())
    alpha = meta["alpha"]
    if expect_alpha is not None and alpha is not None and abs(alpha - expect_alpha) > 1e-12:
        warnings.warn(
            f"pseudo-label store {directory} was produced with alpha={alpha}, "
            f"current config uses alpha={expect_alpha}",
            stacklevel=2,
        )
    records = {}
    for sample_id in meta["ids"]:
        records[sample_id] = PseudoLabelRecord(
            label=load_label(directory / f"{sample_id}_label.png"),
            ignore=load_mask(directory / f"{sample_id}_ignore.png"),
            round_index=int(meta["round_index"]),
            alpha=float(alpha),
        )
    return records


# --------------------------------------------------------------------------
# training configuration


@dataclasses.dataclass
class TrainConfig:
    """Full training-run configuration with reference defaults.

    The default loss weights are the reference operating point: source aux
    weights 0.5/0.5 with main weight 1.0, target weights 0.2/0.2/0.5, and
    a backbone-dependent adversarial weight (1e-4 single-scale, 1e-3
    multi-scale). The adversarial weight default is resolved when the config
    is constructed so echoed configs are always fully concrete.
    """

    data_root: str = ""
    backbone: str = "small-cnn"  # small-cnn | small-cnn-ms
    use_sn: bool = True
    use_ccg: bool = True
    gate_modulated: bool = False  # gate modulated features instead of raw ones
    sfa_enabled: bool = True
    sfa_modalities: str = "rgb"  # rgb | sn | both
    sfa_stage: int = 0  # index into the encoder stage list (finest first)
    sfa_sum_reduction: bool = False
    lambda_1s: float = 0.5
    lambda_2s: float = 0.5
    lambda_3s: float = 1.0
    lambda_1t: float = 0.2
    lambda_2t: float = 0.2
    lambda_3t: float = 0.5
    lambda_4: float | None = None
    alpha: float = 0.99
    rounds: int = 3
    epochs_per_round: int = 10
    batch_size: int = 4
    lr_seg: float = 2.5e-4
    lr_disc: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lambda_4 is None:
            self.lambda_4 = 1e-4 if self.backbone == "small-cnn" else 1e-3
        self.validate()

    def validate(self) -> None:
        if self.backbone not in ("small-cnn", "small-cnn-ms"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.sfa_modalities not in ("rgb", "sn", "both"):
            raise ConfigError(f"sfa.modalities must be rgb|sn|both, got {self.sfa_modalities!r}")
        for name in ("lambda_1s", "lambda_2s", "lambda_3s", "lambda_1t", "lambda_2t", "lambda_3t", "lambda_4"):
            value = getattr(self, name)
            if value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")
        if not (0.5 < self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in (0.5, 1], got {self.alpha}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.epochs_per_round < 1:
            raise ConfigError(f"epochs_per_round must be >= 1, got {self.epochs_per_round}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.sfa_modalities in ("sn", "both") and not self.use_sn:
            raise ConfigError("sfa.modalities includes sn but the SN branch is disabled")
        for name in ("lr_seg", "lr_disc", "momentum", "weight_decay", "poly_power"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


# dotted config key -> (attribute, type)
DOTTED_KEYS: dict[str, tuple[str, type]] = {
    "data.root": ("data_root", str),
    "model.backbone": ("backbone", str),
    "model.use_sn": ("use_sn", bool),
    "model.use_ccg": ("use_ccg", bool),
    "model.gate_modulated": ("gate_modulated", bool),
    "sfa.enabled": ("sfa_enabled", bool),
    "sfa.modalities": ("sfa_modalities", str),
    "sfa.stage": ("sfa_stage", int),
    "sfa.sum_reduction": ("sfa_sum_reduction", bool),
    "lambda.1s": ("lambda_1s", float),
    "lambda.2s": ("lambda_2s", float),
    "lambda.3s": ("lambda_3s", float),
    "lambda.1t": ("lambda_1t", float),
    "lambda.2t": ("lambda_2t", float),
    "lambda.3t": ("lambda_3t", float),
    "lambda.4": ("lambda_4", float),
    "trainer.alpha": ("alpha", float),
    "trainer.rounds": ("rounds", int),
    "trainer.epochs_per_round": ("epochs_per_round", int),
    "trainer.batch_size": ("batch_size", int),
    "trainer.lr_seg": ("lr_seg", float),
    "trainer.lr_disc": ("lr_disc", float),
    "trainer.momentum": ("momentum", float),
    "trainer.weight_decay": ("weight_decay", float),
    "trainer.poly_power": ("poly_power", float),
    "trainer.seed": ("seed", int),
}

_ATTR_TO_DOTTED = {attr: key for key, (attr, _) in DOTTED_KEYS.items()}


def coerce_value(dotted_key: str, raw) -> object:
    """Coerce a JSON or command-line value to the declared type of a key."""
    if dotted_key not in DOTTED_KEYS:
        raise ConfigError(f"unknown config key {dotted_key!r}")
    _, typ = DOTTED_KEYS[dotted_key]
    if typ is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot parse {raw!r} as a boolean for {dotted_key}")
    try:
        return typ(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse {raw!r} as {typ.__name__} for {dotted_key}") from exc


def config_from_dotted(entries: dict) -> TrainConfig:
    """Build a TrainConfig from a flat dotted-key dict; unknown keys reject."""
    kwargs = {}
    for key, raw in entries.items():
        attr, _ = DOTTED_KEYS.get(key, (None, None))
        if attr is None:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[attr] = coerce_value(key, raw)
    try:
        return TrainConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dotted(cfg: TrainConfig) -> dict:
    """Flat dotted-key dict with every value resolved; round-trips exactly."""
    return {key: getattr(cfg, attr) for key, (attr, _) in DOTTED_KEYS.items()}


def load_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    """Read a flat dotted-key JSON config; absent keys take the defaults."""
    text = Path(path).read_text().strip()
    entries = json.loads(text) if text else {}
    if not isinstance(entries, dict):
        raise ConfigError(f"config {path} must contain a JSON object")
    if overrides:
        entries.update(overrides)
    return config_from_dotted(entries)


def parse_override(spec: str) -> tuple[str, object]:
    """Parse a KEY=VALUE override into a (dotted key, coerced value) pair."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} must have the form key=value")
    key, raw = spec.split("=", 1)
    key = key.strip()
    return key, coerce_value(key, raw.strip())
