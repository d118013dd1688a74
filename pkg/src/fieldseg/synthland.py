"""Synthetic agricultural landscapes with exact ground truth.

Fields are cells of a power diagram (weighted Voronoi) whose seeds are placed
by variable-radius dart throwing with log-normal target areas, then moved by
two Lloyd steps. Cells are convex, so every field is a simple polygon. A
spatially smooth score over cell centroids marks the non-crop cells. Imagery
is rendered per season from per-field reflectance draws, blurred, and noised.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial import cKDTree

from . import kernels
from .geometry import FieldPolygon, GridGeometry, RasterGrid, rasterize_ids

# baseline crop and non-crop reflectance (R, G, B)
CROP_BASE = np.array([0.32, 0.36, 0.26])
NONCROP_BASE = np.array([0.20, 0.27, 0.17])
FIELD_SPREAD = 0.12
PHENOLOGY_AMPLITUDE = 0.05
# seed spacing as a fraction of the summed target radii
DART_SPACING = 0.6

PRESETS = {
    # median 1.3 ha fields on 4.77 m imagery
    "source-large": dict(pixel_size=4.77, size_lognormal=(math.log(13000.0), 0.6)),
    # median 0.24 ha fields on 4.8 m imagery
    "target-small": dict(pixel_size=4.8, size_lognormal=(math.log(2400.0), 0.6)),
}


@dataclass(frozen=True)
class LandscapeSpec:
    seed: int = 0
    extent_px: tuple[int, int] = (128, 128)
    pixel_size: float = 4.8
    size_lognormal: tuple[float, float] = (math.log(2400.0), 0.6)
    field_density: float | None = None
    crop_fraction: float = 0.85
    n_seasons: int = 3
    contrast: float = 0.6
    noise_sigma: float = 0.015
    blur_sigma: float = 0.6

    def __post_init__(self):
        h, w = self.extent_px
        if h < 1 or w < 1:
            raise ValueError("extent_px must be positive")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")
        if self.size_lognormal[1] < 0:
            raise ValueError("size_lognormal sigma must be >= 0")
        if self.field_density is not None and not self.field_density > 0:
            raise ValueError("field_density must be positive")
        for name in ("crop_fraction", "contrast"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.n_seasons < 1:
            raise ValueError("n_seasons must be >= 1")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise_sigma and blur_sigma must be >= 0")

    @property
    def median_area_m2(self) -> float:
        return math.exp(self.size_lognormal[0])

    @property
    def mean_area_m2(self) -> float:
        if self.field_density is not None:
            return 1e6 / self.field_density
        mu, sigma = self.size_lognormal
        return math.exp(mu + sigma ** 2 / 2)

    @property
    def median_area_px(self) -> float:
        return self.median_area_m2 / self.pixel_size ** 2

    def replace(self, **kw) -> "LandscapeSpec":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["extent_px"] = list(self.extent_px)
        d["size_lognormal"] = list(self.size_lognormal)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LandscapeSpec":
        d = dict(d)
        d["extent_px"] = tuple(d["extent_px"])
        d["size_lognormal"] = tuple(d["size_lognormal"])
        return cls(**d)


def domain_preset(name: str, **overrides) -> LandscapeSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; valid presets: {', '.join(sorted(PRESETS))}")
    return LandscapeSpec(**{**PRESETS[name], **overrides})


@dataclass
class SyntheticScene:
    spec: LandscapeSpec
    imagery: list[RasterGrid]
    polygons: list[FieldPolygon]
    noncrop_mask: np.ndarray
    # per-field rendering draws, rows aligned with ``polygons``
    draws: dict = field(default_factory=dict, repr=False)
    location: tuple[float, float] = (0.0, 0.0)
    scene_id: str = ""

    @property
    def grid(self) -> GridGeometry:
        return self.imagery[0].geometry

    def field_ids(self) -> np.ndarray:
        return rasterize_ids(self.polygons, self.grid)


# --------------------------------------------------------------------------
# tessellation

def _poly_area_centroid(poly: np.ndarray) -> tuple[float, np.ndarray]:
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = cross.sum() / 2
    if abs(a) < 1e-12:
        return 0.0, poly.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6 * a)
    cy = ((y + yn) * cross).sum() / (6 * a)
    return abs(a), np.array([cx, cy])


def power_cells(points: np.ndarray, weights: np.ndarray, width: float, height: float,
                k: int = 32) -> list[np.ndarray]:
    """Power-diagram cells clipped to the ``[0, width] x [0, height]`` box."""
    n = len(points)
    rect = np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=float)
    if n == 0:
        return []
    if n == 1:
        return [rect]
    points = np.ascontiguousarray(points, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    _, nbrs = cKDTree(points).query(points, k=min(k, n))
    return [kernels.power_cell(i, points, weights, nbrs[i], width, height) for i in range(n)]


def _tessellate(rng, n_seeds: int, sigma: float, width: int, height: int,
                lloyd_steps: int = 2, attempts: int = 40):
    areas = np.exp(rng.normal(0.0, sigma, size=n_seeds))
    areas *= width * height / n_seeds / areas.mean()
    radii = np.sort(np.sqrt(areas / math.pi))[::-1]
    cands = rng.random((n_seeds, attempts, 2)) * (width, height)
    pts, placed = kernels.dart_throw(cands, radii, DART_SPACING)
    weights = radii[placed] ** 2
    cells = power_cells(pts, weights, width, height)
    for _ in range(lloyd_steps):
        keep = [i for i, c in enumerate(cells) if len(c) >= 3]
        pts = np.asarray([_poly_area_centroid(cells[i])[1] for i in keep]).reshape(-1, 2)
        weights = weights[keep]
        cells = power_cells(pts, weights, width, height)
    return [c for c in cells if len(c) >= 3 and _poly_area_centroid(c)[0] > 1e-9]


def _spec_rng(spec: LandscapeSpec, salt: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{spec.seed}:{salt}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _tessellation(spec: LandscapeSpec, max_rounds: int = 6):
    """Cells (pixel units) whose median area tracks the requested median."""
    h, w = spec.extent_px
    target = spec.median_area_px
    mean_px = spec.mean_area_m2 / spec.pixel_size ** 2
    n = max(1, int(round(h * w / mean_px)))
    best = None
    for rnd in range(max_rounds):
        rng = _spec_rng(spec, f"tess{rnd}")
        cells = _tessellate(rng, n, spec.size_lognormal[1], w, h)
        med = float(np.median([_poly_area_centroid(c)[0] for c in cells]))
        err = abs(math.log(med / target))
        if best is None or err < best[0]:
            best = (err, cells)
        if err < 0.04 or spec.field_density is not None:
            break
        n = max(1, int(round(n * med / target)))
    return best[1]


# --------------------------------------------------------------------------

def generate_landscape(spec: LandscapeSpec, location=(0.0, 0.0), scene_id: str = "") -> SyntheticScene:
    """Deterministic scene from ``spec``: polygons, per-season imagery, non-crop mask."""
    if spec.median_area_px < 4:
        raise ValueError("fields unresolvable at this pixel size "
                         f"(median field {spec.median_area_px:.2f} px^2 < 4 px^2)")
    h, w = spec.extent_px
    grid = GridGeometry(h, w, spec.pixel_size, (0.0, h * spec.pixel_size))
    cells = _tessellation(spec)

    # non-crop: cells with the lowest smooth score until the area share is met
    rng = _spec_rng(spec, "landuse")
    cents = np.asarray([_poly_area_centroid(c)[1] for c in cells]).reshape(-1, 2)
    areas = np.asarray([_poly_area_centroid(c)[0] for c in cells])
    coarse = ndi.gaussian_filter(rng.normal(size=(8, 8)), 1.5, mode="wrap")
    score = ndi.map_coordinates(coarse, [cents[:, 1] / h * 7, cents[:, 0] / w * 7], order=1) if len(cells) else np.zeros(0)
    order = np.argsort(score, kind="stable")
    noncrop = np.zeros(len(cells), dtype=bool)
    need = (1.0 - spec.crop_fraction) * h * w
    acc = 0.0
    for i in order:
        if acc >= need - 1e-9:
            break
        noncrop[i] = True
        acc += areas[i]
    if spec.crop_fraction == 0:
        noncrop[:] = True
    # power-diagram slivers cannot be rasterised; they join the non-crop land
    noncrop |= areas < 1.0

    polys = []
    for c, nc in zip(cells, noncrop):
        if nc:
            continue
        ring = grid.to_world(c)
        polys.append(FieldPolygon(len(polys) + 1, ring, "synthetic"))

    n = len(polys)
    rng = _spec_rng(spec, "reflectance")
    draws = {
        "u": rng.normal(size=(n, 3)),
        "v": rng.normal(size=(n, 3)),
        "phase": rng.uniform(0, 2 * math.pi, size=n),
        "pheno": rng.uniform(0, 2 * math.pi, size=n),
    }
    scene = SyntheticScene(spec, [], polys, np.zeros((h, w), dtype=np.uint8), draws,
                           (float(location[0]), float(location[1])), scene_id)
    ids = rasterize_ids(polys, grid)
    scene.noncrop_mask = (ids == 0).astype(np.uint8)
    scene.imagery = _render(scene, ids, spec.contrast)
    return scene


def _render(scene: SyntheticScene, ids: np.ndarray, contrast: float) -> list[RasterGrid]:
    spec = scene.spec
    h, w = spec.extent_px
    grid = GridGeometry(h, w, spec.pixel_size, (0.0, h * spec.pixel_size))
    d = scene.draws
    n = len(scene.polygons)
    tex_rng = _spec_rng(spec, "texture")
    texture = ndi.gaussian_filter(tex_rng.normal(size=(h, w, 3)), (0.8, 0.8, 0)) * 0.08
    noise_rng = _spec_rng(spec, "noise")
    noncrop = ids == 0
    out = []
    for s in range(spec.n_seasons):
        theta = 2 * math.pi * s / spec.n_seasons
        z = np.cos(theta + d["phase"])[:, None] * d["u"] + np.sin(theta + d["phase"])[:, None] * d["v"]
        pheno = PHENOLOGY_AMPLITUDE * np.sin(theta + d["pheno"])
        refl = np.zeros((n + 1, 3))
        refl[1:] = CROP_BASE + contrast * FIELD_SPREAD * z
        refl[1:, 1] += contrast * pheno
        img = refl[ids]
        img[noncrop] = NONCROP_BASE + texture[noncrop]
        if spec.blur_sigma > 0:
            img = ndi.gaussian_filter(img, (spec.blur_sigma, spec.blur_sigma, 0), mode="nearest")
        noise = noise_rng.normal(size=img.shape) * spec.noise_sigma
        img = np.clip(img + noise, 0.0, 1.0).astype(np.float32)
        out.append(RasterGrid(img, grid.pixel_size, grid.origin, [f"s{s}_red", f"s{s}_green", f"s{s}_blue"]))
    return out


def field_reflectance(scene: SyntheticScene, season: int, contrast: float | None = None) -> np.ndarray:
    """Noise-free per-field reflectance (n_fields x 3) for one season."""
    contrast = scene.spec.contrast if contrast is None else contrast
    d = scene.draws
    theta = 2 * math.pi * season / scene.spec.n_seasons
    z = np.cos(theta + d["phase"])[:, None] * d["u"] + np.sin(theta + d["phase"])[:, None] * d["v"]
    refl = CROP_BASE + contrast * FIELD_SPREAD * z
    refl[:, 1] += contrast * PHENOLOGY_AMPLITUDE * np.sin(theta + d["pheno"])
    return refl


def render_low_contrast_variant(scene: SyntheticScene, contrast_drop: float) -> SyntheticScene:
    """Same geometry and noise, inter-field reflectance spread scaled by ``1 - contrast_drop``."""
    if not 0.0 <= contrast_drop <= 1.0:
        raise ValueError("contrast_drop must lie in [0, 1]")
    if contrast_drop == 0:
        return dataclasses.replace(scene, imagery=[RasterGrid(g.data.copy(), g.pixel_size, g.origin, list(g.band_names))
                                                   for g in scene.imagery])
    contrast = scene.spec.contrast * (1.0 - contrast_drop)
    new = dataclasses.replace(scene, spec=scene.spec)
    new.imagery = _render(scene, scene.field_ids(), contrast)
    new.draws = dict(scene.draws, contrast=contrast)
    return new


# --------------------------------------------------------------------------
# domains: many scenes at random locations, persisted with a manifest

def scene_seed(domain_seed: int, index: int) -> int:
    digest = hashlib.sha256(f"scene:{domain_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def generate_domain(spec: LandscapeSpec, n_scenes: int, region_km: float = 100.0,
                    name: str = "domain") -> list[SyntheticScene]:
    rng = np.random.default_rng(spec.seed)
    locs = rng.uniform(0, region_km, size=(n_scenes, 2))
    return [generate_landscape(spec.replace(seed=scene_seed(spec.seed, i)), tuple(locs[i]),
                               f"{name}-{i:04d}") for i in range(n_scenes)]


def save_scene(scene: SyntheticScene, directory) -> dict:
    from .io import write_geojson, write_raster

    directory = Path(directory)
    stem = scene.scene_id or "scene"
    files = {"imagery": [], "polygons": f"{stem}.geojson", "noncrop": f"{stem}_noncrop",
             "spec": f"{stem}_spec.json"}
    for s, img in enumerate(scene.imagery):
        write_raster(directory / f"{stem}_s{s}", img)
        files["imagery"].append(f"{stem}_s{s}")
    g = scene.grid
    write_raster(directory / files["noncrop"], RasterGrid(scene.noncrop_mask, g.pixel_size, g.origin, ["noncrop"]),
                 dtype="uint8")
    write_geojson(directory / files["polygons"], scene.polygons, "synthetic")
    (directory / files["spec"]).write_text(json.dumps(scene.spec.to_dict(), sort_keys=True))
    return {"scene_id": stem, "location": list(scene.location), **files}


def save_domain(scenes: list[SyntheticScene], directory, name: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = [save_scene(s, directory) for s in scenes]
    manifest = {"domain": name, "n_scenes": len(scenes), "scenes": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_domain(directory) -> list[SyntheticScene]:
    """Reload scenes from a manifest (geometry, imagery, spec; render draws are regenerated)."""
    from .io import read_geojson, read_raster

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    scenes = []
    for e in manifest["scenes"]:
        spec = LandscapeSpec.from_dict(json.loads((directory / e["spec"]).read_text()))
        imagery = [read_raster(directory / p) for p in e["imagery"]]
        noncrop = read_raster(directory / e["noncrop"]).data[:, :, 0]
        polys = read_geojson(directory / e["polygons"])
        scenes.append(SyntheticScene(spec, imagery, polys, noncrop, {}, tuple(e["location"]), e["scene_id"]))
    return scenes
