"""Synthetic driving scenes: corridor, vehicles, ego trajectory, sensors and ground truth.

Everything lives in the ego frame: the ego vehicle sits at the origin facing
+x, and every raster has rows along x and columns along y.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
from matplotlib.path import Path

from gaussfusion.core.errors import ContractError
from gaussfusion.render.renderer import RasterConfig
from gaussfusion.scene.gaussians import SceneBounds
from gaussfusion.scene.sensors import CameraModel

logger = logging.getLogger(__name__)

CLASS_NAMES = ('background', 'drivable', 'lane_line', 'vehicle', 'ego_path')
BACKGROUND, DRIVABLE, LANE_LINE, VEHICLE, EGO_PATH = range(len(CLASS_NAMES))

LANE_WIDTH = 3.5
LANES = 3
LANE_LINE_WIDTH = 0.3
EGO_PATH_HALF_WIDTH = 1.0
VEHICLE_SIZE = (4.5, 1.9, 1.5)
VEHICLE_GAP = 6.0
MOUNT_HEIGHT = 1.5
HORIZON_SECONDS = 4.0
SPEED_RANGE = (1.5, 3.0)
ARC_CURVATURE = (0.01, 0.04)
TURN_CURVATURE = (0.06, 0.12)
TURN_START = (2.0, 6.0)
DRAW_STEP = 0.25
GROUND_DENSITY = 2.0
VEHICLE_SURFACE_POINTS = 200
GROUND_NOISE = 0.03

DIFFICULTY_VEHICLES = {'empty': (0, 0), 'easy': (0, 2), 'normal': (0, 6), 'hard': (4, 6)}
CORRIDOR_KINDS = ('straight', 'arc', 'turn')

# RGB per rendered surface; index CLASS_NAMES, then sky last
SURFACE_COLORS = np.array([
    [0.30, 0.42, 0.25],
    [0.45, 0.45, 0.48],
    [0.95, 0.95, 0.90],
    [0.80, 0.15, 0.10],
    [0.45, 0.45, 0.48],
    [0.55, 0.70, 0.95],
])
SKY = len(CLASS_NAMES)


@dataclass(frozen=True)
class Corridor:
    """Centerline that runs straight, bends at constant curvature, then runs straight again.

    ``turn_start`` and ``turn_end`` are arclengths; a straight corridor has zero
    curvature and never bends.
    """
    kind: str
    curvature: float = 0.0
    turn_start: float = 0.0
    turn_end: float = math.inf

    def curvature_at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        inside = (s >= self.turn_start) & (s < self.turn_end)
        return np.where(inside, self.curvature, 0.0)

    def pose(self, s) -> Tuple[np.ndarray, np.ndarray]:
        """(xy (n, 2), heading (n,)) at arclengths ``s``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self.curvature == 0.0:
            return np.stack([s, np.zeros_like(s)], axis=-1), np.zeros_like(s)
        k, s0 = self.curvature, self.turn_start
        u = np.clip(s, s0, self.turn_end) - s0
        heading = k * u
        x = np.where(s < s0, s, s0 + np.sin(heading) / k)
        y = np.where(s < s0, 0.0, (1.0 - np.cos(heading)) / k)
        beyond = np.maximum(s - self.turn_end, 0.0) if math.isfinite(self.turn_end) else np.zeros_like(s)
        x = x + beyond * np.cos(heading)
        y = y + beyond * np.sin(heading)
        return np.stack([x, y], axis=-1), heading

    def offset(self, s, lateral: float) -> np.ndarray:
        xy, heading = self.pose(s)
        normal = np.stack([-np.sin(heading), np.cos(heading)], axis=-1)
        return xy + lateral * normal

    def strip(self, s_from: float, s_to: float, left: float, right: float) -> np.ndarray:
        """Closed polygon between lateral offsets ``right`` < ``left`` over [s_from, s_to]."""
        count = max(int(math.ceil((s_to - s_from) / DRAW_STEP)), 1) + 1
        s = np.linspace(s_from, s_to, count)
        return np.concatenate([self.offset(s, left), self.offset(s, right)[::-1]])

    def to_dict(self) -> dict:
        return {'kind': self.kind, 'curvature': self.curvature, 'turn_start': self.turn_start,
                'turn_end': self.turn_end if math.isfinite(self.turn_end) else None}

    @classmethod
    def from_dict(cls, data: Mapping) -> 'Corridor':
        end = data.get('turn_end')
        return cls(data['kind'], float(data['curvature']), float(data['turn_start']),
                   math.inf if end is None else float(end))


def sample_corridor(rng: np.random.Generator, kind: Optional[str] = None) -> Corridor:
    kind = kind or CORRIDOR_KINDS[int(rng.integers(len(CORRIDOR_KINDS)))]
    sign = 1.0 if rng.random() < 0.5 else -1.0
    if kind == 'straight':
        return Corridor('straight')
    if kind == 'arc':
        return Corridor('arc', sign * rng.uniform(*ARC_CURVATURE), 0.0)
    if kind == 'turn':
        curvature = sign * rng.uniform(*TURN_CURVATURE)
        start = rng.uniform(*TURN_START)
        return Corridor('turn', curvature, start, start + 0.5 * math.pi / abs(curvature))
    raise ContractError(f"unknown corridor kind '{kind}', expected one of {CORRIDOR_KINDS}")


def max_speed(bounds: SceneBounds) -> float:
    reach = 0.75 * min(bounds.x_max, bounds.y_max, -bounds.y_min)
    return min(SPEED_RANGE[1], reach / HORIZON_SECONDS)


def ego_trajectory(corridor: Corridor, speed: float, horizon: int) -> np.ndarray:
    """Waypoints at t = dt..T*dt travelling the centerline at constant speed."""
    dt = HORIZON_SECONDS / horizon
    return corridor.pose(speed * dt * np.arange(1, horizon + 1))[0]


def sample_ego_trajectories(rng: np.random.Generator, count: int, horizon: int,
                            bounds: SceneBounds) -> np.ndarray:
    """(count, T, 2) trajectories from the same kinematic sampler as ``generate_scene``."""
    top = max_speed(bounds)
    trajs = [ego_trajectory(sample_corridor(rng), rng.uniform(min(SPEED_RANGE[0], top), top), horizon)
             for _ in range(count)]
    return np.stack(trajs)


@dataclass(frozen=True)
class Vehicle:
    x: float
    y: float
    yaw: float
    length: float = VEHICLE_SIZE[0]
    width: float = VEHICLE_SIZE[1]
    height: float = VEHICLE_SIZE[2]

    def footprint(self) -> np.ndarray:
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return local @ np.array([[c, s], [-s, c]]) + np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw, self.length, self.width, self.height])


def place_vehicles(rng: np.random.Generator, corridor: Corridor, count: int, reach: float) -> List[Vehicle]:
    """Up to ``count`` vehicles centred in the side lanes, never closer than VEHICLE_GAP along a lane."""
    placed: List[Tuple[float, float]] = []
    vehicles: List[Vehicle] = []
    for _ in range(50 * max(count, 1)):
        if len(vehicles) == count:
            break
        lateral = LANE_WIDTH if rng.random() < 0.5 else -LANE_WIDTH
        s = rng.uniform(-reach, reach)
        if any(lat == lateral and abs(s - other) < VEHICLE_GAP for lat, other in placed):
            continue
        xy = corridor.offset(s, lateral)[0]
        heading = float(corridor.pose(s)[1][0]) + rng.normal(0.0, 0.05)
        placed.append((lateral, s))
        vehicles.append(Vehicle(float(xy[0]), float(xy[1]), heading))
    return vehicles


def rasterize_polygons(polygons: Sequence[Tuple[int, np.ndarray]], raster: RasterConfig) -> np.ndarray:
    """Paint (class, polygon) pairs in order onto an (H, W) class-index map."""
    centers = raster.pixel_centers().reshape(-1, 2)
    out = np.full(raster.h * raster.w, BACKGROUND, dtype=np.int64)
    for cls, poly in polygons:
        out[Path(poly).contains_points(centers)] = cls
    return out.reshape(raster.h, raster.w)


def scene_polygons(corridor: Corridor, vehicles: Sequence[Vehicle], reach: float,
                   ego_reach: Optional[float] = None) -> List[Tuple[int, np.ndarray]]:
    half = 0.5 * LANES * LANE_WIDTH
    polygons = [(DRIVABLE, corridor.strip(-reach, reach, half, -half))]
    for lateral in (0.5 * LANE_WIDTH, -0.5 * LANE_WIDTH):
        polygons.append((LANE_LINE, corridor.strip(-reach, reach, lateral + 0.5 * LANE_LINE_WIDTH,
                                                   lateral - 0.5 * LANE_LINE_WIDTH)))
    if ego_reach is not None:
        polygons.append((EGO_PATH, corridor.strip(0.0, ego_reach, EGO_PATH_HALF_WIDTH, -EGO_PATH_HALF_WIDTH)))
    polygons.extend((VEHICLE, v.footprint()) for v in vehicles)
    return polygons


def make_cameras(count: int, height: int, width: int) -> List[CameraModel]:
    """Level cameras on the ego roof, evenly spread in yaw starting forward."""
    fov = min(2.0 * math.pi / count, math.radians(120.0))
    return [CameraModel.looking(2.0 * math.pi * i / count, height, width, fov=fov, mount_height=MOUNT_HEIGHT)
            for i in range(count)]


def _box_hits(origin: np.ndarray, dirs: np.ndarray, vehicle: Vehicle) -> np.ndarray:
    """Ray distance to a vehicle box per ray, inf where missed."""
    c, s = math.cos(vehicle.yaw), math.sin(vehicle.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = rot @ (origin - np.array([vehicle.x, vehicle.y, 0.0]))
    d = dirs @ rot.T
    d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    lo = np.array([-0.5 * vehicle.length, -0.5 * vehicle.width, 0.0])
    hi = np.array([0.5 * vehicle.length, 0.5 * vehicle.width, vehicle.height])
    t1, t2 = (lo - o) / d, (hi - o) / d
    near = np.minimum(t1, t2).max(axis=1)
    far = np.maximum(t1, t2).min(axis=1)
    hit = (near <= far) & (far > 0.0)
    return np.where(hit, np.maximum(near, 0.0), np.inf)


def render_camera(camera: CameraModel, corridor: Corridor, vehicles: Sequence[Vehicle], reach: float) -> np.ndarray:
    """(3, H, W) image: each pixel ray shows the nearest vehicle box, the ground surface or sky."""
    m = camera.projection[:, :3]
    origin = -np.linalg.solve(m, camera.projection[:, 3])
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing='ij')
    pixels = np.stack([cols.reshape(-1), rows.reshape(-1), np.ones(rows.size)], axis=1)
    dirs = np.linalg.solve(m, pixels.T).T

    surface = np.full(len(dirs), SKY)
    down = dirs[:, 2] < -1e-9
    t_ground = np.where(down, -origin[2] / np.where(down, dirs[:, 2], -1.0), np.inf)
    ground_xy = origin[:2] + dirs[:, :2] * np.where(down, t_ground, 0.0)[:, None]
    ground = np.full(len(dirs), BACKGROUND)
    for cls, poly in scene_polygons(corridor, (), reach):
        ground[Path(poly).contains_points(ground_xy)] = cls
    surface = np.where(down, ground, surface)

    t_vehicle = np.full(len(dirs), np.inf)
    for vehicle in vehicles:
        t_vehicle = np.minimum(t_vehicle, _box_hits(origin, dirs, vehicle))
    surface = np.where(t_vehicle < t_ground, VEHICLE, surface)
    image = SURFACE_COLORS[surface].reshape(camera.height, camera.width, 3)
    return image.transpose(2, 0, 1).copy()


def point_histogram(rng: np.random.Generator, vehicles: Sequence[Vehicle], bounds: SceneBounds,
                    raster: RasterConfig, bins: int) -> np.ndarray:
    """(bins, H, W) log-count histogram of sampled ground and vehicle surface points."""
    area = float(np.prod(bounds.extent))
    count = int(GROUND_DENSITY * area)
    ground = np.column_stack([rng.uniform(bounds.x_min, bounds.x_max, count),
                              rng.uniform(bounds.y_min, bounds.y_max, count),
                              rng.normal(0.0, GROUND_NOISE, count)])
    clouds = [ground]
    for v in vehicles:
        perimeter = 2.0 * (v.length + v.width)
        t = rng.uniform(0.0, perimeter, VEHICLE_SURFACE_POINTS)
        corners = v.footprint()
        edges = np.array([v.length, v.width, v.length, v.width])
        start = np.concatenate([[0.0], np.cumsum(edges)[:-1]])
        edge = np.searchsorted(np.cumsum(edges), t, side='right').clip(0, 3)
        frac = ((t - start[edge]) / edges[edge])[:, None]
        xy = corners[edge] + frac * (corners[(edge + 1) % 4] - corners[edge])
        z = rng.uniform(0.0, v.height, VEHICLE_SURFACE_POINTS)
        clouds.append(np.column_stack([xy, z]))
    points = np.concatenate(clouds)
    hist, _ = np.histogramdd(points, bins=(raster.h, raster.w, bins),
                             range=[(bounds.x_min, bounds.x_max), (bounds.y_min, bounds.y_max),
                                    (bounds.z_min, bounds.z_max)])
    return np.log1p(hist).transpose(2, 0, 1)


@dataclass(frozen=True)
class SceneSettings:
    raster: RasterConfig
    horizon: int = 8
    cameras: int = 3
    camera_height: int = 32
    camera_width: int = 64
    bev_bins: int = 8

    @classmethod
    def from_config(cls, config: Mapping) -> 'SceneSettings':
        return cls(raster=RasterConfig.from_config(config), horizon=config['planner.horizon'],
                   cameras=config['camera.count'], camera_height=config['camera.height'],
                   camera_width=config['camera.width'], bev_bins=config['backbone.bev_bins'])


@dataclass
class SceneSample:
    """One synthetic frame with its sensors and supervision."""
    gt_map: np.ndarray
    gt_traj: np.ndarray
    camera_rasters: np.ndarray
    point_bev_raster: np.ndarray
    cameras: List[CameraModel]
    ego_state: np.ndarray
    vehicles: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    corridor: Corridor = Corridor('straight')
    difficulty: str = 'normal'

    def arrays(self) -> dict:
        return {'gt_map': self.gt_map, 'gt_traj': self.gt_traj, 'camera_rasters': self.camera_rasters,
                'point_bev_raster': self.point_bev_raster, 'ego_state': self.ego_state,
                'vehicles': self.vehicles,
                'camera_projections': np.stack([c.projection for c in self.cameras])}

    def meta(self) -> dict:
        return {'corridor': self.corridor.to_dict(), 'difficulty': self.difficulty,
                'cameras': [{'height': c.height, 'width': c.width} for c in self.cameras]}


def generate_scene(rng: np.random.Generator, bounds: SceneBounds, difficulty: str = 'normal',
                   settings: Optional[SceneSettings] = None) -> SceneSample:
    """Sample a corridor, traffic and ego motion, then build every sensor and label."""
    if difficulty not in DIFFICULTY_VEHICLES:
        raise ContractError(f"unknown difficulty '{difficulty}', expected one of {sorted(DIFFICULTY_VEHICLES)}")
    settings = settings or SceneSettings(RasterConfig.from_bounds(bounds, 64, 64))
    reach = 1.5 * float(np.max(np.abs([bounds.x_min, bounds.x_max, bounds.y_min, bounds.y_max])))

    corridor = sample_corridor(rng)
    top = max_speed(bounds)
    speed = rng.uniform(min(SPEED_RANGE[0], top), top)
    gt_traj = ego_trajectory(corridor, speed, settings.horizon)
    low, high = DIFFICULTY_VEHICLES[difficulty]
    vehicles = place_vehicles(rng, corridor, int(rng.integers(low, high + 1)), reach)

    ego_reach = speed * HORIZON_SECONDS
    gt_map = rasterize_polygons(scene_polygons(corridor, vehicles, reach, ego_reach), settings.raster)
    cameras = make_cameras(settings.cameras, settings.camera_height, settings.camera_width)
    images = np.stack([render_camera(cam, corridor, vehicles, reach) for cam in cameras])
    histogram = point_histogram(rng, vehicles, bounds, settings.raster, settings.bev_bins)
    return SceneSample(
        gt_map=gt_map,
        gt_traj=gt_traj,
        camera_rasters=images,
        point_bev_raster=histogram,
        cameras=cameras,
        ego_state=np.array([speed, float(corridor.curvature_at(0.0))]),
        vehicles=np.stack([v.as_array() for v in vehicles]) if vehicles else np.zeros((0, 6)),
        corridor=corridor,
        difficulty=difficulty,
    )


def generate_scenes(seed: int, count: int, bounds: SceneBounds, difficulty: str = 'normal',
                    settings: Optional[SceneSettings] = None, threads: int = 1) -> List[SceneSample]:
    """``count`` scenes, each from its own child seed so output is independent of ``threads``."""
    seeds = np.random.SeedSequence(seed).spawn(count)

    def one(child):
        return generate_scene(np.random.default_rng(child), bounds, difficulty, settings)

    if threads <= 1:
        scenes = [one(child) for child in seeds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scenes = list(pool.map(one, seeds))
    logger.info("generated %d %s scenes", count, difficulty)
    return scenes
