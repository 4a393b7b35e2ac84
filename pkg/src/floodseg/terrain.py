"""Synthetic terrain and flood-event generation, plus label propagation.

Terrain comes from a diamond-square fractal heightmap whose square step
averages only the two along-edge neighbors on grid borders; with zero
roughness the result is then exactly the bilinear interpolation of the
four seeded corners. Flood truth is a water-level fill from the grid
boundary, which guarantees the generated labeling never violates the
gravity constraint. Spectra are two-color class renderings with noise
and a configurable fraction of deliberately misleading pixels that only
the elevation can disambiguate.

Label propagation mirrors annotation assistance: marking a pixel
flooded spreads downhill by a pit-filling BFS (everything reachable at
or below the seed's elevation), marking it dry climbs uphill along
non-decreasing paths.
"""

import json
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .raster import ElevationMap, Grid, LabelMap, read_grid, write_grid

_ELEV_SPAN = 40.0  # meters; overall vertical scale of generated terrain

_WATER_COLOR = np.array([0.16, 0.28, 0.55], dtype=np.float64)
_LAND_COLOR = np.array([0.42, 0.47, 0.25], dtype=np.float64)

REGION_FILES = ("elev", "disaster", "normal", "labels", "truth")


@dataclass
class SynthConfig:
    width: int = 256
    height: int = 256
    seed: int = 0
    roughness: float = 0.55
    water_level_quantile: float | None = 0.42
    water_level: float | None = None
    canopy_fraction: float = 0.2
    ambiguity_fraction: float = 0.15
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("terrain dims must be >= 16")
        for name in ("canopy_fraction", "ambiguity_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1]")
        if (self.water_level is None) == (self.water_level_quantile is None):
            raise ValueError(
                "set exactly one of water_level (meters) or water_level_quantile"
            )
        if self.water_level_quantile is not None and not (
            0.0 <= self.water_level_quantile <= 1.0
        ):
            raise ValueError("water_level_quantile must be in [0,1]")


@dataclass
class Region:
    """One generated area: terrain, imagery, sparse labels, full truth."""

    elevation: ElevationMap
    disaster_rgb: Grid
    normal_rgb: Grid
    labels: LabelMap
    truth: LabelMap

    def __post_init__(self):
        lv, tv = self.labels.values, self.truth.values
        if not np.all((lv == 0) | (lv == tv)):
            raise ValueError("labels disagree with truth on annotated pixels")

    @property
    def width(self):
        return self.elevation.width

    @property
    def height(self):
        return self.elevation.height


def gen_terrain(cfg):
    """Diamond-square fractal heightmap, deterministic from the seed."""
    rng = np.random.default_rng([cfg.seed, 0])
    side = max(cfg.width, cfg.height) - 1
    n = 1
    while n < side:
        n *= 2
    g = np.zeros((n + 1, n + 1), dtype=np.float64)
    g[0, 0], g[0, n], g[n, 0], g[n, n] = rng.uniform(0.0, _ELEV_SPAN, 4)

    step = n
    while step > 1:
        half = step // 2
        amp = cfg.roughness * _ELEV_SPAN * (step / n)

        tl = g[0:n:step, 0:n:step]
        tr = g[0:n:step, step::step]
        bl = g[step::step, 0:n:step]
        br = g[step::step, step::step]
        m = n // step
        g[half::step, half::step] = (tl + tr + bl + br) / 4.0 + amp * rng.uniform(
            -1.0, 1.0, (m, m)
        )

        # square points on corner rows: borders average the 2 along-edge
        # neighbors so zero roughness stays exactly bilinear
        rows = np.arange(0, n + 1, step)
        cols = np.arange(half, n, step)
        s = g[np.ix_(rows, cols - half)] + g[np.ix_(rows, cols + half)]
        interior = (rows > 0) & (rows < n)
        s[interior] += g[np.ix_(rows[interior] - half, cols)] + g[
            np.ix_(rows[interior] + half, cols)
        ]
        div = np.where(interior, 4.0, 2.0)[:, None]
        g[np.ix_(rows, cols)] = s / div + amp * rng.uniform(-1.0, 1.0, s.shape)

        rows = np.arange(half, n, step)
        cols = np.arange(0, n + 1, step)
        s = g[np.ix_(rows - half, cols)] + g[np.ix_(rows + half, cols)]
        interior = (cols > 0) & (cols < n)
        s[:, interior] += g[np.ix_(rows, cols[interior] - half)] + g[
            np.ix_(rows, cols[interior] + half)
        ]
        div = np.where(interior, 4.0, 2.0)[None, :]
        g[np.ix_(rows, cols)] = s / div + amp * rng.uniform(-1.0, 1.0, s.shape)

        step = half

    crop = g[: cfg.height, : cfg.width].astype(np.float32)
    return ElevationMap(crop)


def resolve_water_level(cfg, elevation):
    if cfg.water_level is not None:
        return float(cfg.water_level)
    return float(np.quantile(elevation.values, cfg.water_level_quantile))


def flood_truth(elevation, water_level):
    """Water-level fill from the boundary: fully labeled, physics-consistent.

    A pixel floods iff it connects (8-neighborhood) to a boundary cell at
    or below the water level through cells at or below the level.
    """
    hv = elevation.values
    h, w = hv.shape
    below = hv <= water_level
    flooded = np.zeros((h, w), dtype=bool)
    dq = deque()
    for i in range(h):
        for j in (0, w - 1):
            if below[i, j] and not flooded[i, j]:
                flooded[i, j] = True
                dq.append((i, j))
    for j in range(w):
        for i in (0, h - 1):
            if below[i, j] and not flooded[i, j]:
                flooded[i, j] = True
                dq.append((i, j))
    while dq:
        i, j = dq.popleft()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ni, nj = i + di, j + dj
                if 0 <= ni < h and 0 <= nj < w and below[ni, nj] and not flooded[ni, nj]:
                    flooded[ni, nj] = True
                    dq.append((ni, nj))
    return LabelMap(np.where(flooded, 1, -1).astype(np.int8))


def _blob_mask(rng, h, w, fraction, radius_frac=0.08):
    """Random disk blobs covering roughly `fraction` of an h x w grid.

    Each blob is one rng.integers triple, so the mask is deterministic.
    Overshoot is bounded by the last disk; radius_frac caps disk radius
    as a fraction of the short side.
    """
    mask = np.zeros((h, w), dtype=bool)
    if fraction <= 0.0:
        return mask
    if fraction >= 1.0:
        mask[:] = True
        return mask
    target = int(round(fraction * h * w))
    rmax = max(3, int(radius_frac * min(h, w)))
    ii = np.arange(h)[:, None]
    jj = np.arange(w)[None, :]
    while mask.sum() < target:
        ci = rng.integers(0, h)
        cj = rng.integers(0, w)
        r = rng.integers(2, rmax + 1)
        mask |= (ii - ci) ** 2 + (jj - cj) ** 2 <= r * r
    return mask


def render_spectra(elevation, truth, cfg):
    """Disaster-time and normal-time RGB for a generated flood event.

    An ambiguity_fraction of pixels sit under coherent blobs whose color
    class is drawn independently of the truth (canopy/cloud analogue):
    within a blob the spectra carry no class information and smoothing
    over neighbors cannot recover it, only the elevation can. At
    fraction 1 the whole image is colored independently of the truth.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    h, w = truth.values.shape
    flooded = truth.values == 1

    color = np.where(flooded, 1, 0)
    # wide blobs: surrounding context cannot reveal what is underneath
    misleading = _blob_mask(rng, h, w, cfg.ambiguity_fraction, radius_frac=0.16)
    fake = _blob_mask(rng, h, w, 0.5)  # truth-independent color layout
    color = np.where(misleading, fake, color)
    disaster = np.where(
        (color == 1)[None], _WATER_COLOR[:, None, None], _LAND_COLOR[:, None, None]
    )
    disaster = disaster + rng.normal(0.0, cfg.noise_sigma, (3, h, w))

    normal = _LAND_COLOR[:, None, None] + rng.normal(0.0, cfg.noise_sigma, (3, h, w))

    clip = lambda a: np.clip(a, 0.0, 1.0).astype(np.float32)
    return Grid(clip(disaster)), Grid(clip(normal))


def mask_canopy(truth, cfg):
    """Hide roughly canopy_fraction of the truth under random blobs."""
    rng = np.random.default_rng([cfg.seed, 2])
    tv = truth.values
    hidden = _blob_mask(rng, *tv.shape, cfg.canopy_fraction)
    labels = np.where(hidden, np.int8(0), tv)
    return LabelMap(labels.astype(np.int8))


def _check_seed(hv, seed_pixel):
    h, w = hv.shape
    i0, j0 = seed_pixel
    if not (0 <= i0 < h and 0 <= j0 < w):
        raise ValueError(f"seed pixel {seed_pixel} out of bounds for {w}x{h}")


def _bfs(hv, seed_pixel, admit):
    h, w = hv.shape
    i0, j0 = seed_pixel
    seen = {(i0, j0)}
    dq = deque([(i0, j0)])
    while dq:
        i, j = dq.popleft()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ni, nj = i + di, j + dj
                if (
                    0 <= ni < h
                    and 0 <= nj < w
                    and (ni, nj) not in seen
                    and admit((i, j), (ni, nj))
                ):
                    seen.add((ni, nj))
                    dq.append((ni, nj))
    return seen


def propagate_flood(elevation, seed_pixel, threshold="seed"):
    """Pit-filling BFS: spread a flood mark to cells the water would reach.

    threshold='seed' admits cells at or below the seed's elevation
    (water-level semantics); 'path_monotone' admits each step only when
    it does not climb.
    """
    hv = elevation.values if isinstance(elevation, ElevationMap) else np.asarray(elevation)
    _check_seed(hv, seed_pixel)
    if threshold == "seed":
        limit = hv[seed_pixel]
        admit = lambda c, q: hv[q] <= limit
    elif threshold == "path_monotone":
        admit = lambda c, q: hv[q] <= hv[c]
    else:
        raise ValueError("threshold must be 'seed' or 'path_monotone'")
    return _bfs(hv, seed_pixel, admit)


def propagate_dry(elevation, seed_pixel):
    """Hill-climbing BFS: spread a dry mark along non-decreasing paths."""
    hv = elevation.values if isinstance(elevation, ElevationMap) else np.asarray(elevation)
    _check_seed(hv, seed_pixel)
    return _bfs(hv, seed_pixel, lambda c, q: hv[q] >= hv[c])


def generate_region(cfg):
    """All artifacts for one region, deterministic from cfg.seed."""
    elevation = gen_terrain(cfg)
    level = resolve_water_level(cfg, elevation)
    truth = flood_truth(elevation, level)
    disaster, normal = render_spectra(elevation, truth, cfg)
    labels = mask_canopy(truth, cfg)
    return Region(elevation, disaster, normal, labels, truth)


def _region_seed(base_seed, index):
    # distinct, reproducible per-region streams from one dataset seed
    return int(np.random.default_rng([base_seed, 100 + index]).integers(2**31))


def gen_dataset(cfg, out_dir, n_train, n_test):
    """Generate regions and a manifest; returns the manifest dict.

    Layout: <out_dir>/region_<k>/{elev,disaster,normal,labels,truth}.fgrd
    plus manifest.json listing roles, seeds and the config echo.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    regions = []
    for idx in range(n_train + n_test):
        rseed = _region_seed(cfg.seed, idx)
        rcfg = SynthConfig(**{**asdict(cfg), "seed": rseed})
        region = generate_region(rcfg)
        name = f"region_{idx}"
        rdir = out / name
        rdir.mkdir(exist_ok=True)
        grids = {
            "elev": region.elevation.grid,
            "disaster": region.disaster_rgb,
            "normal": region.normal_rgb,
            "labels": region.labels.grid,
            "truth": region.truth.grid,
        }
        paths = {}
        for key in REGION_FILES:
            p = rdir / f"{key}.fgrd"
            write_grid(grids[key], p)
            paths[key] = f"{name}/{key}.fgrd"
        regions.append(
            {
                "name": name,
                "role": "train" if idx < n_train else "test",
                "seed": rseed,
                "paths": paths,
            }
        )
    manifest = {
        "schema": "floodseg-dataset-v1",
        "config": asdict(cfg),
        "regions": regions,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_region(region_dir):
    """Read one region directory written by gen_dataset."""
    rdir = Path(region_dir)
    return Region(
        elevation=ElevationMap(read_grid(rdir / "elev.fgrd")),
        disaster_rgb=read_grid(rdir / "disaster.fgrd"),
        normal_rgb=read_grid(rdir / "normal.fgrd"),
        labels=LabelMap(read_grid(rdir / "labels.fgrd")),
        truth=LabelMap(read_grid(rdir / "truth.fgrd")),
    )


def load_dataset(root):
    """Read a dataset directory: returns (manifest, {name: (role, Region)})."""
    root = Path(root)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    regions = {}
    for entry in manifest["regions"]:
        regions[entry["name"]] = (entry["role"], load_region(root / entry["name"]))
    return manifest, regions
