"""Procedural two-domain scene generator.

Every sample is an analytic street scene rendered by ray casting: a flat road
strip between raised sidewalks with curb faces, side ground running out to a
finite back wall, and open sky above the wall. Depth comes from exact
ray-plane intersection, the road label comes from geometry alone, and RGB is
a per-region palette color plus seeded noise.

Domains differ only in appearance (palettes, background categories, noise,
shadows); the camera and scene geometry ranges are shared. Surface normals
derived from depth are therefore nearly identical in distribution across
domains, while RGB shifts, which is exactly the asymmetry the adaptation
experiments need.

World frame: camera at the origin, x right, y down, z forward. The camera
pitches down by `pitch` radians. The road surface lies at y = cam_height and
sidewalk tops at y = cam_height - sidewalk_height.
"""

from __future__ import annotations

import dataclasses
import shutil
from pathlib import Path

import numpy as np

from . import dataio
from .errors import ConfigError, DataError, GenerationError
from .geometry import CameraIntrinsics
from .seeding import rng_for

REGION_SKY = 0
REGION_ROAD = 1
REGION_SIDEWALK = 2
REGION_CURB = 3
REGION_OUTER = 4
REGION_WALL = 5

REGION_NAMES = {
    REGION_SKY: "sky",
    REGION_ROAD: "road",
    REGION_SIDEWALK: "sidewalk",
    REGION_CURB: "curb",
    REGION_OUTER: "outer",
    REGION_WALL: "wall",
}

# Road-family colors per palette id: road, sidewalk, curb, sky. The daylight
# road is dark asphalt, far from every other daylight color, so a model fit on
# daylight alone can separate road by color. The dusk palette inverts the cue:
# its road is a muted green near the daylight vegetation tones and its
# sidewalk is dark, near the daylight road tone.
PALETTES: dict[str, dict[str, tuple[float, float, float]]] = {
    "daylight": {
        "road": (0.21, 0.21, 0.24),
        "sidewalk": (0.63, 0.61, 0.57),
        "curb": (0.52, 0.51, 0.49),
        "sky": (0.76, 0.83, 0.93),
    },
    "dusk": {
        "road": (0.31, 0.43, 0.33),
        "sidewalk": (0.24, 0.24, 0.28),
        "curb": (0.33, 0.33, 0.36),
        "sky": (0.46, 0.48, 0.59),
    },
    "overcast": {
        "road": (0.38, 0.38, 0.40),
        "sidewalk": (0.55, 0.53, 0.50),
        "curb": (0.47, 0.46, 0.44),
        "sky": (0.67, 0.69, 0.73),
    },
}

# Background categories: the ground beyond the sidewalk and the back wall.
BACKGROUNDS: dict[str, dict[str, tuple[float, float, float]]] = {
    "grass-brick": {"outer": (0.31, 0.52, 0.28), "wall": (0.56, 0.36, 0.30)},
    "grass-concrete": {"outer": (0.35, 0.50, 0.31), "wall": (0.53, 0.53, 0.51)},
    "gravel-fence": {"outer": (0.47, 0.45, 0.41), "wall": (0.41, 0.37, 0.34)},
    "dirt-hedge": {"outer": (0.43, 0.37, 0.29), "wall": (0.25, 0.39, 0.25)},
    "moss-stone": {"outer": (0.28, 0.40, 0.26), "wall": (0.45, 0.46, 0.49)},
}


@dataclasses.dataclass(frozen=True)
class SceneParams:
    """Full description of one scene; identical params give identical samples."""

    height: int = 64
    width: int = 64
    focal_rel: float = 0.9  # focal length as a fraction of image width
    cam_height: float = 1.5  # meters above the road plane
    pitch: float = 0.12  # downward pitch, radians
    road_half_width: float = 3.0
    sidewalk_height: float = 0.25  # curb step height
    sidewalk_width: float = 2.0
    wall_distance: float = 28.0
    wall_height: float = 4.0
    palette: str = "daylight"
    background: str = "grass-brick"
    noise_std: float = 0.02
    depth_noise_std: float = 0.0
    color_jitter: float = 0.03
    shadow: bool = False
    shadow_strength: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height < 32 or self.width < 32:
            raise ConfigError(f"image size must be at least 32x32, got {self.height}x{self.width}")
        if self.road_half_width <= 0:
            raise ConfigError("road_half_width must be positive")
        if self.sidewalk_height < 0:
            raise ConfigError("sidewalk_height must be >= 0")
        if self.palette not in PALETTES:
            raise ConfigError(f"unknown palette {self.palette!r}")
        if self.background not in BACKGROUNDS:
            raise ConfigError(f"unknown background {self.background!r}")

    def intrinsics(self) -> CameraIntrinsics:
        f = self.focal_rel * self.width
        return CameraIntrinsics(fx=f, fy=f, cx=(self.width - 1) / 2.0, cy=(self.height - 1) / 2.0)


def generate_scene(params: SceneParams) -> dataio.Sample:
    """Render one sample (RGB, depth, label, regions) from scene parameters."""
    h, w = params.height, params.width
    intr = params.intrinsics()
    rng = rng_for(params.seed, "scene")

    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    ray_x = np.broadcast_to((u - intr.cx) / intr.fx, (h, w)).copy()
    ray_y_cam = np.broadcast_to((v - intr.cy) / intr.fy, (h, w)).copy()

    cos_p, sin_p = np.cos(params.pitch), np.sin(params.pitch)
    # World-frame ray direction; camera-frame z component is 1, so the ray
    # parameter t of a hit equals its camera-frame depth.
    dx = ray_x
    dy = cos_p * ray_y_cam + sin_p
    dz = -sin_p * ray_y_cam + cos_p

    y_road = params.cam_height
    y_side = params.cam_height - params.sidewalk_height
    x_curb = params.road_half_width
    x_outer = params.road_half_width + params.sidewalk_width
    inf = np.inf

    def plane_hits() -> list[tuple[np.ndarray, int | np.ndarray]]:
        hits = []

        # Road plane, restricted to the central strip.
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dy > 1e-9, y_road / dy, inf)
        x_hit = t * dx
        z_hit = t * dz
        t = np.where((np.abs(x_hit) <= x_curb) & (z_hit > 0), t, inf)
        hits.append((t, REGION_ROAD))

        # Sidewalk-level plane, split into sidewalk strip and outer ground.
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dy > 1e-9, y_side / dy, inf)
        x_hit = t * dx
        z_hit = t * dz
        on_plane = (np.abs(x_hit) >= x_curb) & (z_hit > 0)
        region = np.where(np.abs(x_hit) <= x_outer, REGION_SIDEWALK, REGION_OUTER)
        hits.append((np.where(on_plane, t, inf), region))

        # Curb faces at x = +-road_half_width between road and sidewalk level.
        for sign in (1.0, -1.0):
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(sign * dx > 1e-9, sign * x_curb / dx, inf)
            y_hit = t * dy
            z_hit = t * dz
            ok = (y_hit >= y_side) & (y_hit <= y_road) & (z_hit > 0)
            hits.append((np.where(ok, t, inf), REGION_CURB))

        # Back wall at z = wall_distance, from side-ground level up.
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dz > 1e-9, params.wall_distance / dz, inf)
        y_hit = t * dy
        ok = y_hit >= (y_side - params.wall_height)
        hits.append((np.where(ok, t, inf), REGION_WALL))
        return hits

    depth = np.full((h, w), inf)
    regions = np.full((h, w), REGION_SKY, dtype=np.uint8)
    for t, region in plane_hits():
        closer = t < depth
        depth = np.where(closer, t, depth)
        if isinstance(region, np.ndarray):
            regions = np.where(closer, region.astype(np.uint8), regions)
        else:
            regions = np.where(closer, np.uint8(region), regions)
    depth = np.where(np.isfinite(depth), depth, 0.0)

    label = (regions == REGION_ROAD).astype(np.uint8)
    if label.sum() == 0:
        raise GenerationError(
            f"no road visible with pitch={params.pitch}, cam_height={params.cam_height}"
        )

    if params.depth_noise_std > 0:
        noise = rng.normal(0.0, params.depth_noise_std, size=depth.shape)
        depth = np.where(depth > 0, np.maximum(depth + noise, 1e-3), 0.0)

    rgb = _paint(params, regions, depth, dz, rng)
    return dataio.Sample(
        sample_id="",
        rgb=rgb,
        depth=depth,
        intrinsics=intr,
        label=label,
        regions=regions,
    )


def _paint(
    params: SceneParams,
    regions: np.ndarray,
    depth: np.ndarray,
    dz: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-region base colors, optional shadow band, then pixel noise."""
    palette = PALETTES[params.palette]
    background = BACKGROUNDS[params.background]
    base = {
        REGION_ROAD: palette["road"],
        REGION_SIDEWALK: palette["sidewalk"],
        REGION_CURB: palette["curb"],
        REGION_SKY: palette["sky"],
        REGION_OUTER: background["outer"],
        REGION_WALL: background["wall"],
    }
    h, w = regions.shape
    rgb = np.zeros((h, w, 3), dtype=np.float64)
    for region_id, color in base.items():
        jitter = rng.uniform(-params.color_jitter, params.color_jitter, size=3)
        rgb[regions == region_id] = np.clip(np.asarray(color) + jitter, 0.0, 1.0)

    if params.shadow:
        z_near = rng.uniform(3.0, 0.45 * params.wall_distance)
        z_span = rng.uniform(2.0, 6.0)
        z_world = depth * dz
        ground = np.isin(regions, (REGION_ROAD, REGION_SIDEWALK, REGION_CURB, REGION_OUTER))
        band = ground & (z_world >= z_near) & (z_world <= z_near + z_span)
        rgb[band] = rgb[band] * (1.0 - params.shadow_strength)

    rgb = rgb + rng.normal(0.0, params.noise_std, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


# --------------------------------------------------------------------------
# domain configuration and dataset emission

Range = tuple[float, float]

GEOMETRY_FIELDS = (
    "height",
    "width",
    "focal_rel",
    "cam_height",
    "pitch",
    "road_half_width",
    "sidewalk_height",
    "sidewalk_width",
    "wall_distance",
    "wall_height",
)


@dataclasses.dataclass(frozen=True)
class DomainConfig:
    """Distribution over SceneParams for one domain."""

    name: str
    count: int
    seed: int
    palettes: tuple[str, ...]
    backgrounds: tuple[str, ...]
    height: int = 64
    width: int = 64
    focal_rel: float = 0.9
    cam_height: Range = (1.4, 1.6)
    pitch: Range = (0.10, 0.16)
    road_half_width: Range = (2.4, 3.4)
    sidewalk_height: Range = (0.20, 0.32)
    sidewalk_width: Range = (1.6, 2.6)
    wall_distance: Range = (20.0, 36.0)
    wall_height: Range = (3.0, 5.0)
    noise_std: float = 0.02
    depth_noise_std: float = 0.0
    color_jitter: float = 0.03
    shadow_prob: float = 0.0
    shadow_strength: Range = (0.35, 0.60)

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ConfigError("domain sample count must be >= 1")
        for palette in self.palettes:
            if palette not in PALETTES:
                raise ConfigError(f"unknown palette {palette!r}")
        for background in self.backgrounds:
            if background not in BACKGROUNDS:
                raise ConfigError(f"unknown background {background!r}")

    def geometry_signature(self) -> tuple:
        return tuple(getattr(self, field) for field in GEOMETRY_FIELDS)


def check_shared_geometry(source: DomainConfig, target: DomainConfig) -> None:
    """Domains must share scene-geometry ranges; only appearance may differ."""
    if source.geometry_signature() != target.geometry_signature():
        raise ConfigError("source and target domains must share camera and scene geometry ranges")


def sample_params(cfg: DomainConfig, index: int) -> SceneParams:
    """Draw the scene parameters of sample `index`; counter-based, order-free."""
    rng = rng_for(cfg.seed, "params", index)

    def between(lo_hi: Range) -> float:
        return float(rng.uniform(lo_hi[0], lo_hi[1]))

    return SceneParams(
        height=cfg.height,
        width=cfg.width,
        focal_rel=cfg.focal_rel,
        cam_height=between(cfg.cam_height),
        pitch=between(cfg.pitch),
        road_half_width=between(cfg.road_half_width),
        sidewalk_height=between(cfg.sidewalk_height),
        sidewalk_width=between(cfg.sidewalk_width),
        wall_distance=between(cfg.wall_distance),
        wall_height=between(cfg.wall_height),
        palette=str(rng.choice(list(cfg.palettes))),
        background=str(rng.choice(list(cfg.backgrounds))),
        noise_std=cfg.noise_std,
        depth_noise_std=cfg.depth_noise_std,
        color_jitter=cfg.color_jitter,
        shadow=bool(rng.random() < cfg.shadow_prob),
        shadow_strength=between(cfg.shadow_strength),
        seed=int(rng_for(cfg.seed, "scene-seed", index).integers(0, 2**63 - 1)),
    )


def generate_domain(
    cfg: DomainConfig,
    out_dir: str | Path,
    role: str,
    withhold_labels: bool = False,
    write_sn: bool = False,
) -> dataio.DatasetLayout:
    """Write `cfg.count` samples in the dataset layout and return it.

    A failed write removes the partially written directory before re-raising.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise DataError(f"output directory {out_dir} exists and is not empty")
    try:
        (out_dir / dataio.RGB_DIR).mkdir(parents=True, exist_ok=True)
        (out_dir / dataio.DEPTH_DIR).mkdir(exist_ok=True)
        if not withhold_labels:
            (out_dir / dataio.LABEL_DIR).mkdir(exist_ok=True)
        if write_sn:
            (out_dir / dataio.SN_DIR).mkdir(exist_ok=True)

        ids = [f"{i:04d}" for i in range(cfg.count)]
        layout = dataio.DatasetLayout(
            root=out_dir, role=role, ids=ids, seed=cfg.seed, has_labels=not withhold_labels
        )
        intrinsics = None
        for index, sample_id in enumerate(ids):
            params = sample_params(cfg, index)
            sample = generate_scene(params)
            if intrinsics is None:
                intrinsics = sample.intrinsics
                intrinsics.save(layout.intrinsics_path())
            dataio.save_rgb(layout.rgb_path(sample_id), sample.rgb)
            dataio.save_depth(layout.depth_path(sample_id), sample.depth)
            if not withhold_labels:
                dataio.save_label(layout.label_path(sample_id), sample.label)
            if write_sn:
                from . import geometry

                dataio.save_sn_cache(
                    layout.sn_path(sample_id),
                    geometry.depth_to_normals(sample.depth, sample.intrinsics),
                )
        layout.write_manifest()
        return layout
    except Exception:
        shutil.rmtree(out_dir, ignore_errors=True)
        raise


# --------------------------------------------------------------------------
# benchmark: one source domain + one target domain, three splits


def default_benchmark_config(seed: int = 0) -> dict:
    """Reference two-domain benchmark used by the adaptation experiments.

    The source domain is clean daylight imagery over grassy backgrounds, with
    a dark asphalt road that is color-separable from everything else in the
    frame. The target domain keeps the identical geometry distribution but
    inverts the color cue: its road is a muted green near the source's grass
    tones, its sidewalk is dark like the source's road, and it adds stronger
    pixel noise and occasional shadow bands. RGB models trained on source
    alone transfer poorly; depth (hence surface normals) is unchanged by
    construction.
    """
    return {
        "seed": seed,
        "counts": {"source-train": 64, "target-train": 64, "target-eval": 32},
        "source": {
            "palettes": ("daylight",),
            "backgrounds": ("grass-brick", "grass-concrete"),
            "noise_std": 0.02,
            "shadow_prob": 0.0,
        },
        "target": {
            "palettes": ("dusk",),
            "backgrounds": ("gravel-fence", "dirt-hedge", "moss-stone"),
            "noise_std": 0.05,
            "color_jitter": 0.05,
            "shadow_prob": 0.35,
        },
    }


_DOMAIN_FIELDS = {f.name for f in dataclasses.fields(DomainConfig)}


def _domain_from_dict(name: str, count: int, seed: int, entries: dict) -> DomainConfig:
    kwargs = {}
    for key, value in entries.items():
        if key not in _DOMAIN_FIELDS or key in ("name", "count", "seed"):
            raise ConfigError(f"unknown domain config key {key!r}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return DomainConfig(name=name, count=count, seed=seed, **kwargs)


def generate_benchmark(config: dict, out_root: str | Path, write_sn: bool = False) -> dict[str, dataio.DatasetLayout]:
    """Generate source-train / target-train / target-eval split directories."""
    seed = int(config.get("seed", 0))
    counts = config.get("counts", {})
    for split in ("source-train", "target-train", "target-eval"):
        if split not in counts:
            raise ConfigError(f"benchmark config missing counts[{split!r}]")

    source = _domain_from_dict(
        "source", int(counts["source-train"]), _split_seed(seed, "source-train"), config["source"]
    )
    target_train = _domain_from_dict(
        "target", int(counts["target-train"]), _split_seed(seed, "target-train"), config["target"]
    )
    target_eval = _domain_from_dict(
        "target", int(counts["target-eval"]), _split_seed(seed, "target-eval"), config["target"]
    )
    check_shared_geometry(source, target_train)

    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    layouts = {
        "source-train": generate_domain(
            source, out_root / "source-train", role="source-train", write_sn=write_sn
        ),
        "target-train": generate_domain(
            target_train, out_root / "target-train", role="target-train",
            withhold_labels=True, write_sn=write_sn,
        ),
        "target-eval": generate_domain(
            target_eval, out_root / "target-eval", role="target-eval", write_sn=write_sn
        ),
    }
    return layouts


def _split_seed(seed: int, split: str) -> int:
    return int(rng_for(seed, "split", split).integers(0, 2**31 - 1))
