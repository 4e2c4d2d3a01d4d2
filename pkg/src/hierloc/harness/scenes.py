"""Synthetic forest scenes and registration pairs.

A scene's geometry (terrain, trees, shrubs) is fixed by ``SceneConfig.seed``;
point samples of that geometry are drawn from separate random streams so the
same place can be scanned repeatedly with independent sampling. Clouds are
z-up with the scanner at the origin of their own frame.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..pointcloud import PointCloud, RigidTransform, invert

VIEWPOINTS = ("ground", "aerial")


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    extent: float = 30.0                       # side of the scanned square / 2x ground range
    tree_count: int = 45                       # trees per extent x extent square
    trunk_radius_range: tuple[float, float] = (0.15, 0.5)
    tree_height_range: tuple[float, float] = (6.0, 18.0)
    canopy_density: float = 6.0                # points per m^2 of canopy surface
    ground_density: float = 6.0                # points per m^2 of terrain
    trunk_density: float = 30.0                # points per m^2 of bark
    ground_roughness: float = 1.5              # terrain relief amplitude in metres
    shrubs_per_tree: float = 0.75
    clutter_fraction: float = 0.02             # uniform random points, fraction of structured points
    viewpoint: str = "ground"
    occlusion_arc: float = 0.0                 # degrees
    noise_sigma: float = 0.0                   # metres
    min_tree_spacing: float = 2.0

    def validate(self) -> "SceneConfig":
        lo, hi = self.trunk_radius_range
        hlo, hhi = self.tree_height_range
        if not (self.extent > 0 and 0 < lo <= hi and 0 < hlo <= hhi):
            raise ValueError("scene extent, trunk radii and tree heights must be positive ranges")
        if self.tree_count < 0 or self.shrubs_per_tree < 0:
            raise ValueError("tree count and shrubs per tree must be non-negative")
        if min(self.canopy_density, self.ground_density, self.trunk_density) <= 0:
            raise ValueError("point densities must be positive")
        if self.ground_roughness < 0 or self.noise_sigma < 0 or not 0 <= self.clutter_fraction < 1:
            raise ValueError("roughness, noise and clutter must be non-negative (clutter < 1)")
        if not 0 <= self.occlusion_arc < 360:
            raise ValueError("occlusion arc must lie in [0, 360)")
        if self.viewpoint not in VIEWPOINTS:
            raise ValueError(f"viewpoint must be one of {VIEWPOINTS}")
        return self


@dataclass(frozen=True)
class Scene:
    cfg: SceneConfig
    half: float                  # geometry covers [-half, half]^2
    terrain: np.ndarray          # (n_waves, 4): amplitude, kx, ky, phase
    trees: np.ndarray            # (T, 8): x, y, r, trunk_h, canopy_z, canopy_rxy, canopy_rz, lean
    shrubs: np.ndarray           # (B, 5): x, y, rxy, rz, zoff

    def ground_z(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        z = np.zeros_like(x, dtype=np.float64)
        for a, kx, ky, ph in self.terrain:
            z += a * np.sin(kx * x + ky * y + ph)
        return z


def _poisson_disc(rng, n, half, min_dist, max_tries=30):
    pts = np.empty((n, 2))
    k = tries = 0
    while k < n and tries < n * max_tries:
        c = rng.uniform(-half, half, 2)
        tries += 1
        d = pts[:k] - c
        if k == 0 or np.min(d[:, 0] ** 2 + d[:, 1] ** 2) >= min_dist ** 2:
            pts[k] = c
            k += 1
    return pts[:k]


def build_scene(cfg: SceneConfig, margin: float = 10.0) -> Scene:
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0])
    half = cfg.extent / 2 + margin
    n_waves = 4
    amp = rng.uniform(0.3, 1.0, n_waves) * cfg.ground_roughness / np.sqrt(n_waves)
    ang = rng.uniform(0, 2 * np.pi, n_waves)
    wl = rng.uniform(8.0, 30.0, n_waves)
    terrain = np.stack([amp, 2 * np.pi / wl * np.cos(ang), 2 * np.pi / wl * np.sin(ang),
                        rng.uniform(0, 2 * np.pi, n_waves)], axis=1)
    # scale the tree budget with the area including the margin
    n_trees = int(round(cfg.tree_count * (2 * half) ** 2 / cfg.extent ** 2))
    xy = _poisson_disc(rng, n_trees, half, cfg.min_tree_spacing)
    T = len(xy)
    r = rng.uniform(*cfg.trunk_radius_range, T)
    height = rng.uniform(*cfg.tree_height_range, T)
    trunk_h = height * rng.uniform(0.45, 0.7, T)
    crz = (height - trunk_h) / 2
    canopy_z = trunk_h + crz
    crxy = rng.uniform(1.0, 3.0, T) * (0.5 + height / cfg.tree_height_range[1])
    lean = rng.uniform(0, 2 * np.pi, T)
    trees = np.column_stack([xy, r, trunk_h, canopy_z, crxy, crz, lean])
    n_shrubs = int(round(cfg.shrubs_per_tree * n_trees))
    sxy = rng.uniform(-half, half, (n_shrubs, 2))
    shrubs = np.column_stack([sxy, rng.uniform(0.4, 1.5, n_shrubs), rng.uniform(0.3, 1.0, n_shrubs),
                              rng.uniform(0.0, 0.5, n_shrubs)])
    return Scene(cfg, half, terrain, trees, shrubs)


def _ellipsoid_surface(rng, n, centre, rxy, rz):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    # jitter inwards so crowns read as a shell of foliage, not a thin surface
    shell = rng.uniform(0.75, 1.0, (n, 1))
    return centre + v * shell * np.array([rxy, rxy, rz])


def sample_scene(scene: Scene, rng: np.random.Generator, centre=(0.0, 0.0),
                 viewpoint: str | None = None, occlusion_arc: float | None = None,
                 noise_sigma: float | None = None) -> np.ndarray:
    """Draw one scan of ``scene`` seen from ``centre`` (world xy), in world coordinates."""
    cfg = scene.cfg
    viewpoint = cfg.viewpoint if viewpoint is None else viewpoint
    occlusion_arc = cfg.occlusion_arc if occlusion_arc is None else occlusion_arc
    noise_sigma = cfg.noise_sigma if noise_sigma is None else noise_sigma
    cx, cy = centre
    R = cfg.extent / 2
    lo_x, hi_x = cx - R, cx + R
    lo_y, hi_y = cy - R, cy + R
    parts = []

    area = (2 * R) ** 2
    n = rng.poisson(cfg.ground_density * area)
    gx = rng.uniform(lo_x, hi_x, n)
    gy = rng.uniform(lo_y, hi_y, n)
    parts.append(np.column_stack([gx, gy, scene.ground_z(gx, gy)]))

    for x, y, r, th, cz, crxy, crz, lean in scene.trees:
        if abs(x - cx) > R + crxy or abs(y - cy) > R + crxy:
            continue
        base = scene.ground_z(np.array([x]), np.array([y]))[0]
        n = rng.poisson(cfg.trunk_density * 2 * np.pi * r * th)
        a = rng.uniform(0, 2 * np.pi, n)
        h = rng.uniform(0, th, n)
        tilt = 0.03 * h
        parts.append(np.column_stack([x + r * np.cos(a) + tilt * np.cos(lean),
                                      y + r * np.sin(a) + tilt * np.sin(lean), base + h]))
        surf = 4 * np.pi * ((crxy * crxy) ** 1.6 / 3 + 2 * (crxy * crz) ** 1.6 / 3) ** (1 / 1.6)
        n = rng.poisson(cfg.canopy_density * surf)
        parts.append(_ellipsoid_surface(rng, n, np.array([x + 0.03 * th * np.cos(lean),
                                                          y + 0.03 * th * np.sin(lean), base + cz]), crxy, crz))

    for x, y, rxy, rz, zoff in scene.shrubs:
        if abs(x - cx) > R + rxy or abs(y - cy) > R + rxy:
            continue
        base = scene.ground_z(np.array([x]), np.array([y]))[0]
        n = rng.poisson(cfg.canopy_density * 2 * np.pi * rxy * (rxy + rz))
        parts.append(_ellipsoid_surface(rng, n, np.array([x, y, base + rz + zoff]), rxy, rz))

    pts = np.concatenate(parts)
    if cfg.clutter_fraction > 0:
        n = int(round(cfg.clutter_fraction * len(pts)))
        top = cfg.tree_height_range[1]
        parts.append(np.column_stack([rng.uniform(lo_x, hi_x, n), rng.uniform(lo_y, hi_y, n),
                                      rng.uniform(0, top, n)]))
        pts = np.concatenate(parts)

    rel = pts[:, :2] - np.array([cx, cy])
    if viewpoint == "ground":
        keep = np.hypot(rel[:, 0], rel[:, 1]) <= R
    else:
        keep = (np.abs(rel) <= R).all(axis=1)
        zmin, zmax = pts[:, 2].min(), pts[:, 2].max()
        p_keep = 0.15 + 0.85 * (pts[:, 2] - zmin) / max(zmax - zmin, 1e-9)
        keep &= rng.uniform(size=len(pts)) < p_keep
    if occlusion_arc > 0:
        start = rng.uniform(0, 360)
        az = np.degrees(np.arctan2(rel[:, 1], rel[:, 0])) % 360
        keep &= ((az - start) % 360) >= occlusion_arc
    pts = pts[keep]
    if noise_sigma > 0:
        pts = pts + rng.normal(scale=noise_sigma, size=pts.shape)
    return pts


def synth_scene(cfg: SceneConfig, sample: int = 0) -> PointCloud:
    """One scan of the scene defined by ``cfg``, taken from the scene origin."""
    scene = build_scene(cfg)
    rng = np.random.default_rng([cfg.seed, 1, sample])
    return PointCloud(sample_scene(scene, rng), f"scene{cfg.seed}")


@dataclass(frozen=True)
class Pair:
    query: PointCloud
    target: PointCloud
    T_true: RigidTransform       # maps query coordinates into the target frame


def make_pair(cfg: SceneConfig, T_true: RigidTransform, noise_sigma: float = 0.0,
              occlusion: float = 0.0, sample: int = 0, resample: bool = True,
              scene: Scene | None = None, target: PointCloud | None = None) -> Pair:
    """Target is the scene scan; the query is a fresh scan from the pose ``T_true``.

    The query scanner sits at ``T_true.translation`` in the target frame, so its
    range-limited view overlaps the target only partly. With ``resample=False``
    the query reuses the target's points (before noise and occlusion), which
    gives index-aligned ground-truth correspondences.
    """
    scene = scene or build_scene(cfg)
    target = target if target is not None else synth_scene(cfg)
    if resample:
        rng = np.random.default_rng([cfg.seed, 2, sample])
        world = sample_scene(scene, rng, centre=tuple(T_true.translation[:2]),
                             occlusion_arc=occlusion, noise_sigma=noise_sigma)
    else:
        rng = np.random.default_rng([cfg.seed, 3, sample])
        world = target.points.copy()
        if occlusion > 0:
            rel = world[:, :2] - T_true.translation[:2]
            start = rng.uniform(0, 360)
            az = np.degrees(np.arctan2(rel[:, 1], rel[:, 0])) % 360
            world = world[((az - start) % 360) >= occlusion]
        if noise_sigma > 0:
            world = world + rng.normal(scale=noise_sigma, size=world.shape)
    query = PointCloud(invert(T_true).apply(world), f"{target.id}-q{sample}")
    return Pair(query, target, T_true)


def random_pose(rng: np.random.Generator, max_angle_deg: float = 180.0, max_shift: float = 5.0,
                dz: float = 0.0) -> RigidTransform:
    """z-axis rotation within +-max_angle and xy translation within +-max_shift."""
    ang = np.radians(rng.uniform(-max_angle_deg, max_angle_deg))
    t = np.array([rng.uniform(-max_shift, max_shift), rng.uniform(-max_shift, max_shift),
                  rng.uniform(-dz, dz) if dz else 0.0])
    return RigidTransform.about_z(ang, t)


def vary(cfg: SceneConfig, rng: np.random.Generator, **overrides) -> SceneConfig:
    """Randomise per-place structure so distinct places differ in statistics."""
    base = dict(
        tree_count=int(rng.integers(30, 70)),
        tree_height_range=(float(rng.uniform(4, 9)), float(rng.uniform(12, 24))),
        trunk_radius_range=(float(rng.uniform(0.1, 0.25)), float(rng.uniform(0.3, 0.7))),
        shrubs_per_tree=float(rng.uniform(0.2, 1.5)),
        ground_roughness=float(rng.uniform(0.8, 2.5)),
    )
    base.update(overrides)
    return replace(cfg, **base)
