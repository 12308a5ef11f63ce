"""Procedural objects, task demonstrations and geometric constraint oracles.

Vessels are surfaces of revolution (walls plus a bottom disc, optional torus
handle); sticks are capped cylinders. Objects are built upright with the
base center at the local origin, then partially observed by dropping every
point whose outward normal faces away from a random camera above the table.

Poses follow the object-frame convention: T_AF maps function-object frame
coordinates into the anchor-object frame, both frames sitting at the
observed cloud centroids with world orientation.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import numpy as np

from . import kernels
from .cloud import VOCABULARIES, PointCloud
from .errors import GenerationFailed, InvalidSpec, PartMissing
from .geometry import Pose, TrajectorySpec, rotation_angle
from .tasks import TaskDefinition, get_task

EZ = np.array([0.0, 0.0, 1.0])


# Configuration


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split())


@dataclass(frozen=True)
class OracleConfig:
    align_sigma: float = 0.01
    tilt_window: tuple = (95.0, 135.0)
    tilt_falloff: float = 20.0
    touch_sigma: float = 0.005
    penetration_clearance: float = 0.002
    success_threshold: float = 0.7


@dataclass(frozen=True)
class CategoryTable:
    categories: dict
    task_anchor: dict
    task_function: dict
    oracle: OracleConfig
    generation: dict
    source: str = ""

    def families(self, task: str, role: str) -> tuple:
        table = self.task_anchor if role == "anchor" else self.task_function
        return table[task]


def parse_category_table(text: str) -> CategoryTable:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string(text)
    cats = {}
    for name in cp.sections():
        if name in ("tasks", "oracle", "generation"):
            continue
        sec = cp[name]
        entry = {"kind": sec.get("kind", "vessel")}
        for key, val in sec.items():
            if key == "kind":
                continue
            if key in ("profile",):
                entry[key] = val.strip()
            elif key == "handle":
                entry[key] = sec.getboolean(key)
            else:
                entry[key] = _floats(val)
        cats[name] = entry
    tasks = cp["tasks"]
    anchor = {k[: -len("_anchor")]: tuple(v.split()) for k, v in tasks.items() if k.endswith("_anchor")}
    function = {k[: -len("_function")]: tuple(v.split()) for k, v in tasks.items() if k.endswith("_function")}
    o = cp["oracle"]
    oracle = OracleConfig(
        align_sigma=o.getfloat("align_sigma"),
        tilt_window=_floats(o["tilt_window"]),
        tilt_falloff=o.getfloat("tilt_falloff"),
        touch_sigma=o.getfloat("touch_sigma"),
        penetration_clearance=o.getfloat("penetration_clearance"),
        success_threshold=o.getfloat("success_threshold"),
    )
    gen = {}
    for key, val in cp["generation"].items():
        vals = _floats(val)
        gen[key] = vals[0] if len(vals) == 1 else vals
    gen["n_surface_points"] = int(gen["n_surface_points"])
    gen["max_attempts"] = int(gen["max_attempts"])
    for fams in list(anchor.values()) + list(function.values()):
        for fam in fams:
            if fam not in cats:
                raise InvalidSpec(f"task table names unknown family {fam!r}")
    return CategoryTable(cats, anchor, function, oracle, gen, text)


def default_category_text() -> str:
    return resources.files("cpm").joinpath("categories.cfg").read_text()


def load_category_table(path: str | None = None) -> CategoryTable:
    if path is None:
        return parse_category_table(default_category_text())
    with open(path) as fh:
        return parse_category_table(fh.read())


_DEFAULT_TABLE: CategoryTable | None = None


def default_table() -> CategoryTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = load_category_table()
    return _DEFAULT_TABLE


# Objects


@dataclass(frozen=True)
class ObjectSpec:
    category: str
    parameters: dict
    seed: int

    def to_record(self) -> dict:
        return {"category": self.category, "parameters": dict(self.parameters), "seed": int(self.seed)}

    @classmethod
    def from_record(cls, rec: dict) -> "ObjectSpec":
        return cls(rec["category"], dict(rec["parameters"]), int(rec["seed"]))


def sample_object_spec(category: str, rng: np.random.Generator, table: CategoryTable | None = None) -> ObjectSpec:
    table = table or default_table()
    if category not in table.categories:
        raise InvalidSpec(f"unknown category {category!r}")
    cat = table.categories[category]
    params = {}
    for key, val in cat.items():
        if isinstance(val, tuple):
            params[key] = float(rng.uniform(val[0], val[1]))
    if cat["kind"] == "vessel":
        params["radius_bottom"] = params.pop("radius_bottom_ratio") * params["radius_top"]
        params["handle"] = bool(cat.get("handle", False))
        params["profile"] = cat.get("profile", "straight")
        if params["handle"]:
            params["handle_azimuth"] = float(rng.uniform(0.0, 2.0 * math.pi))
    params["camera_azimuth"] = float(rng.uniform(0.0, 2.0 * math.pi))
    lo, hi = table.generation["camera_elevation"]
    params["camera_elevation"] = float(rng.uniform(lo, hi))
    return ObjectSpec(category, params, int(rng.integers(0, 2**31 - 1)))


def _area_weighted(weights: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    return np.searchsorted(cdf, rng.uniform(size=count))


def _vessel_surface(p: dict, n_total: int, rng: np.random.Generator):
    """Points, outward normals and region tags (0 wall, 1 bottom, 2 handle)."""
    h, rt, rb = p["height"], p["radius_top"], p["radius_bottom"]
    curved = p.get("profile") == "curved"
    grid = np.linspace(0.0, 1.0, 401)
    s_grid = np.clip(grid, 0.02, 1.0) if curved else grid

    def radius(s):
        return rb + (rt - rb) * (np.sqrt(s) if curved else s)

    def dradius_dz(s):
        if curved:
            return (rt - rb) * 0.5 / np.sqrt(s) / h
        return np.full_like(s, (rt - rb) / h)

    r_grid = radius(s_grid)
    slope = dradius_dz(s_grid)
    wall_density = 2.0 * math.pi * r_grid * np.sqrt(1.0 + slope**2)
    wall_area = float(np.trapezoid(wall_density, grid * h))
    bottom_area = math.pi * radius(s_grid[0]) ** 2
    handle_area = 0.0
    if p.get("handle"):
        arc = math.radians(p["handle_arc"])
        handle_area = 2.0 * math.pi * p["handle_tube"] * p["handle_radius"] * arc
    areas = np.array([wall_area, bottom_area, handle_area])
    counts = np.floor(n_total * areas / areas.sum()).astype(int)
    counts[0] += n_total - counts.sum()

    pts, nrm, tags = [], [], []
    # walls
    n = counts[0]
    k = _area_weighted(wall_density, n, rng)
    s = np.clip(grid[k] + rng.uniform(-0.5, 0.5, n) / 400.0, 0.0, 1.0)
    s_eff = np.clip(s, 0.02, 1.0) if curved else s
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    r = radius(s_eff)
    pts.append(np.stack([r * np.cos(phi), r * np.sin(phi), s * h], axis=1))
    normal = np.stack([np.cos(phi), np.sin(phi), -dradius_dz(s_eff)], axis=1)
    nrm.append(normal / np.linalg.norm(normal, axis=1, keepdims=True))
    tags.append(np.zeros(n, dtype=int))
    # bottom disc, seen from inside the vessel
    n = counts[1]
    rr = radius(s_grid[0]) * np.sqrt(rng.uniform(size=n))
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    pts.append(np.stack([rr * np.cos(phi), rr * np.sin(phi), np.zeros(n)], axis=1))
    nrm.append(np.tile(EZ, (n, 1)))
    tags.append(np.ones(n, dtype=int))
    # torus-arc handle at mid height
    n = counts[2]
    if n:
        beta = p["handle_azimuth"]
        d = np.array([math.cos(beta), math.sin(beta), 0.0])
        side = np.array([-math.sin(beta), math.cos(beta), 0.0])
        zm = 0.5 * h
        center = float(radius(np.clip(np.array([0.5]), 0.02, 1.0))[0]) * d + zm * EZ
        big, tube, arc = p["handle_radius"], p["handle_tube"], math.radians(p["handle_arc"])
        psi = rng.uniform(-arc / 2, arc / 2, n)
        chi = rng.uniform(0.0, 2.0 * math.pi, n)
        radial = np.cos(psi)[:, None] * d + np.sin(psi)[:, None] * EZ
        normal = np.cos(chi)[:, None] * radial + np.sin(chi)[:, None] * side
        pts.append(center + big * radial + tube * normal)
        nrm.append(normal)
        tags.append(np.full(n, 2, dtype=int))
    return np.concatenate(pts), np.concatenate(nrm), np.concatenate(tags)


def _stick_surface(p: dict, n_total: int, rng: np.random.Generator):
    rad, length = p["radius"], p["length"]
    side_area = 2.0 * math.pi * rad * length
    cap_area = math.pi * rad**2
    areas = np.array([side_area, cap_area, cap_area])
    counts = np.floor(n_total * areas / areas.sum()).astype(int)
    counts[0] += n_total - counts.sum()
    n = counts[0]
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    z = rng.uniform(0.0, length, n)
    side = np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)
    side_n = np.stack([np.cos(phi), np.sin(phi), np.zeros(n)], axis=1)
    caps, caps_n = [], []
    for count, zc, sign in ((counts[1], 0.0, -1.0), (counts[2], length, 1.0)):
        rr = rad * np.sqrt(rng.uniform(size=count))
        phi = rng.uniform(0.0, 2.0 * math.pi, count)
        caps.append(np.stack([rr * np.cos(phi), rr * np.sin(phi), np.full(count, zc)], axis=1))
        caps_n.append(np.tile(sign * EZ, (count, 1)))
    pts = np.concatenate([side] + caps)
    return pts, np.concatenate([side_n] + caps_n)


def camera_direction(azimuth: float, elevation_deg: float) -> np.ndarray:
    e = math.radians(elevation_deg)
    return np.array([math.cos(e) * math.cos(azimuth), math.cos(e) * math.sin(azimuth), math.sin(e)])


def gen_object(spec: ObjectSpec, table: CategoryTable | None = None, task: str | None = None) -> PointCloud:
    """Surface-sample an upright object and cull it to the camera-facing half."""
    table = table or default_table()
    if spec.category not in table.categories:
        raise InvalidSpec(f"unknown category {spec.category!r}")
    kind = table.categories[spec.category]["kind"]
    p = spec.parameters
    rng = np.random.default_rng(spec.seed)
    n_total = table.generation["n_surface_points"]
    try:
        if kind == "vessel":
            if not (0.0 < p["radius_bottom"] <= p["radius_top"] and p["height"] > 0.0):
                raise InvalidSpec(f"bad vessel parameters {p}")
            pts, nrm, tags = _vessel_surface(p, n_total, rng)
        elif kind == "stick":
            if not (p["radius"] > 0.0 and p["length"] > 0.0):
                raise InvalidSpec(f"bad stick parameters {p}")
            pts, nrm = _stick_surface(p, n_total, rng)
            tags = None
        else:
            raise InvalidSpec(f"unknown object kind {kind!r}")
    except KeyError as exc:
        raise InvalidSpec(f"missing parameter {exc} for {spec.category}") from None

    cam = camera_direction(p["camera_azimuth"], p["camera_elevation"])
    keep = nrm @ cam > 0.0
    pts = pts[keep]

    if kind == "stick":
        vocab = VOCABULARIES["place"]
        z = pts[:, 2] / p["length"]
        labels = np.where(z <= 0.10, vocab.index("tip"), np.where(z >= 0.75, vocab.index("head"), vocab.index("body")))
    else:
        tags = tags[keep]
        top = pts[:, 2] >= 0.9 * p["height"]
        if task == "place" or (task is None and spec.category == "container-like"):
            vocab = VOCABULARIES["place"]
            labels = np.where(tags == 1, vocab.index("bottom"), np.where(top, vocab.index("opening"), vocab.index("body")))
        else:
            vocab = VOCABULARIES["pour"]
            labels = np.where(
                tags == 2, vocab.index("handle"), np.where((tags == 0) & top, vocab.index("rim"), vocab.index("body"))
            )
    return PointCloud(pts, labels, vocab, spec.category)


# Oracles


def _frames(anchor: PointCloud, function: PointCloud):
    return anchor.points.mean(axis=0), function.points.mean(axis=0)


def _part_in_obj(cloud: PointCloud, part: str, center: np.ndarray) -> np.ndarray:
    return cloud.part_points(part) - center


def _horizontal(v: np.ndarray) -> np.ndarray:
    return np.array([v[0], v[1], 0.0])


def handle_direction(function: PointCloud) -> np.ndarray:
    """Handle offset from the body, perpendicular to the object's up axis."""
    h = function.part_points("handle").mean(axis=0) - function.part_points("body").mean(axis=0)
    return h - (h @ EZ) * EZ


def oracle_align(anchor, function, poses, cfg: OracleConfig) -> float:
    ca, cf = _frames(anchor, function)
    ra = _part_in_obj(anchor, "rim", ca).mean(axis=0)
    rf = _part_in_obj(function, "rim", cf).mean(axis=0)
    end = poses.end
    p = end.rotation @ rf + end.translation
    if p[2] <= ra[2]:
        return 0.0
    d = np.linalg.norm((p - ra)[:2])
    return float(math.exp(-(d * d) / (2.0 * cfg.align_sigma**2)))


def tilt_degrees(pose: Pose) -> float:
    return math.degrees(math.acos(float(np.clip((pose.rotation @ EZ)[2], -1.0, 1.0))))


def oracle_tilt(anchor, function, poses, cfg: OracleConfig) -> float:
    anchor.part_points("body")
    function.part_points("body")
    angle = tilt_degrees(poses.end)
    lo, hi = cfg.tilt_window
    outside = max(lo - angle, angle - hi, 0.0)
    return float(max(0.0, 1.0 - outside / cfg.tilt_falloff))


def oracle_facing_up(anchor, function, poses, cfg: OracleConfig) -> float:
    anchor.part_points("body")
    rot = poses.end.rotation
    handle = _horizontal(rot @ handle_direction(function))
    pour = _horizontal(rot @ EZ)
    nh, npour = np.linalg.norm(handle), np.linalg.norm(pour)
    if nh < 1e-12 or npour < 1e-12:
        return 0.0
    return float(np.clip(-(handle @ pour) / (nh * npour), 0.0, 1.0))


def oracle_contain(anchor, function, poses, cfg: OracleConfig) -> float:
    ca, cf = _frames(anchor, function)
    body = _part_in_obj(anchor, "body", ca)
    head = poses.end.apply(_part_in_obj(function, "head", cf))
    center = 0.5 * (body[:, :2].min(axis=0) + body[:, :2].max(axis=0))
    radius = np.linalg.norm(body[:, :2] - center, axis=1).max()
    radial = np.linalg.norm(head[:, :2] - center, axis=1)
    inside = (radial <= radius) & (head[:, 2] >= body[:, 2].min()) & (head[:, 2] <= body[:, 2].max())
    return float(inside.mean())


def tip_gap(anchor, function, pose: Pose) -> float:
    ca, cf = _frames(anchor, function)
    plane = _part_in_obj(anchor, "bottom", ca)[:, 2].mean()
    tip = pose.apply(_part_in_obj(function, "tip", cf))
    return float(tip[:, 2].min() - plane)


def oracle_touch(anchor, function, poses, cfg: OracleConfig) -> float:
    d = abs(tip_gap(anchor, function, poses.end))
    return float(math.exp(-(d * d) / (2.0 * cfg.touch_sigma**2)))


def oracle_place(anchor, function, poses, cfg: OracleConfig) -> float:
    anchor.part_points("body")
    function.part_points("body")
    return float(max(0.0, (poses.end.rotation @ EZ)[2]))


ORACLES: dict[str, Callable] = {
    "align": oracle_align,
    "tilt": oracle_tilt,
    "facing-up": oracle_facing_up,
    "contain": oracle_contain,
    "touch": oracle_touch,
    "place": oracle_place,
}


def oracle(relation: str, anchor: PointCloud, function: PointCloud, poses: TrajectorySpec, cfg: OracleConfig | None = None) -> float:
    """Score in [0, 1] for one relation; raises PartMissing if a part is absent."""
    cfg = cfg or default_table().oracle
    try:
        fn = ORACLES[relation]
    except KeyError:
        raise ValueError(f"no oracle for relation {relation!r}") from None
    return fn(anchor, function, poses, cfg)


def clearance(anchor: PointCloud, function: PointCloud, pose: Pose, stop_below: float = 0.0) -> float:
    """Closest anchor/function point distance with the function at ``pose``."""
    ca, cf = _frames(anchor, function)
    moved = pose.apply(function.points - cf)
    return kernels.min_pair_distance(moved, anchor.points - ca, stop_below)


def interpenetrates(anchor, function, poses: TrajectorySpec, cfg: OracleConfig | None = None) -> bool:
    cfg = cfg or default_table().oracle
    gap = cfg.penetration_clearance
    return any(clearance(anchor, function, p, gap) <= gap for p in poses.poses)


@dataclass
class OracleResult:
    scores: dict
    overall: float
    success: bool
    penetrated: bool = False
    excluded: tuple = ()

    def to_record(self) -> dict:
        return {
            "scores": {k: float(v) for k, v in self.scores.items()},
            "overall": float(self.overall),
            "success": bool(self.success),
            "penetrated": bool(self.penetrated),
            "excluded": list(self.excluded),
        }


def evaluate(task: TaskDefinition, anchor: PointCloud, function: PointCloud, poses: TrajectorySpec, cfg: OracleConfig | None = None) -> OracleResult:
    """All oracles of ``task`` plus the interpenetration gate.

    Relations whose parts are missing are excluded from the mean; a task
    where every relation is excluded raises PartMissing.
    """
    cfg = cfg or default_table().oracle
    scores, excluded = {}, []
    for corr in task.correspondences:
        try:
            scores[corr.relation] = oracle(corr.relation, anchor, function, poses, cfg)
        except PartMissing:
            excluded.append(corr.relation)
    if not scores:
        raise PartMissing(f"no {task.name} constraint can be evaluated on these clouds")
    penetrated = interpenetrates(anchor, function, poses, cfg)
    if penetrated:
        return OracleResult(scores, 0.0, False, True, tuple(excluded))
    overall = 100.0 * float(np.mean(list(scores.values())))
    success = all(s >= cfg.success_threshold for s in scores.values())
    return OracleResult(scores, overall, success, False, tuple(excluded))


# Demonstrations


@dataclass(eq=False)
class Demonstration:
    id: str
    task: TaskDefinition
    anchor: PointCloud
    function: PointCloud
    gt_poses: TrajectorySpec
    free_params: dict = field(default_factory=dict)
    anchor_spec: ObjectSpec | None = None
    function_spec: ObjectSpec | None = None
    seed: int = 0

    @property
    def anchor_frame(self) -> Pose:
        return self.anchor.frame()

    @property
    def function_frame(self) -> Pose:
        return self.function.frame()

    def world_poses(self) -> list[Pose]:
        from .geometry import to_world

        return [to_world(self.anchor_frame, p, self.function_frame) for p in self.gt_poses.poses]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "task": self.task.name,
            "seed": int(self.seed),
            "anchor": self.anchor.to_record(),
            "function": self.function.to_record(),
            "anchor_spec": self.anchor_spec.to_record() if self.anchor_spec else None,
            "function_spec": self.function_spec.to_record() if self.function_spec else None,
            "gt_poses": self.gt_poses.to_list(),
            "free_params": {k: float(v) for k, v in self.free_params.items()},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Demonstration":
        return cls(
            id=rec["id"],
            task=get_task(rec["task"]),
            anchor=PointCloud.from_record(rec["anchor"]),
            function=PointCloud.from_record(rec["function"]),
            gt_poses=TrajectorySpec.from_list(rec["gt_poses"]),
            free_params=dict(rec.get("free_params", {})),
            anchor_spec=ObjectSpec.from_record(rec["anchor_spec"]) if rec.get("anchor_spec") else None,
            function_spec=ObjectSpec.from_record(rec["function_spec"]) if rec.get("function_spec") else None,
            seed=int(rec.get("seed", 0)),
        )


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def _pour_candidate(anchor, function, rng, gen):
    ca, cf = _frames(anchor, function)
    a_pts, f_pts = anchor.points - ca, function.points - cf
    ra = _part_in_obj(anchor, "rim", ca).mean(axis=0)
    rf = _part_in_obj(function, "rim", cf).mean(axis=0)
    if function.has_part("handle"):
        hd = handle_direction(function)
        beta = math.atan2(hd[1], hd[0])
    else:
        beta = float(rng.uniform(-math.pi, math.pi))
    theta = float(rng.uniform(0.0, 2.0 * math.pi))
    lo, hi = default_table().oracle.tilt_window
    tilt = math.radians(float(rng.uniform(lo, hi)))
    u = np.array([math.cos(theta), math.sin(theta), 0.0])
    spin = _rot_z(_wrap(theta - beta))
    rot = _rot_axis(np.cross(EZ, u), tilt) @ spin

    gap = float(rng.uniform(*gen["pour_gap"]))
    moved_z = (f_pts @ rot.T)[:, 2]
    lift = a_pts[:, 2].max() + gap - ra[2] - moved_z.min() + (rot @ rf)[2]
    end = Pose(rot, ra + lift * EZ - rot @ rf)

    offset = float(rng.uniform(*gen["pour_start_offset"]))
    gap0 = float(rng.uniform(*gen["pour_start_gap"]))
    moved_z0 = (f_pts @ spin.T)[:, 2]
    lift0 = a_pts[:, 2].max() + gap0 - ra[2] - moved_z0.min() + (spin @ rf)[2]
    start = Pose(spin, ra - offset * u + lift0 * EZ - spin @ rf)
    free = {"azimuth": theta, "tilt": tilt, "gap": gap, "start_offset": offset, "start_gap": gap0}
    return TrajectorySpec((start, end)), free


def _place_candidate(anchor, function, rng, gen, anchor_base, function_base, anchor_spec, function_spec):
    ca, cf = _frames(anchor, function)
    a_pts = anchor.points - ca
    base_a = anchor_base - ca
    base_f = function_base - cf
    psi = float(rng.uniform(-math.pi + 0.01, math.pi - 0.01))
    rot = _rot_z(psi)
    room = anchor_spec.parameters["radius_bottom"] - function_spec.parameters["radius"] - 0.005
    if room <= 0.0:
        raise GenerationFailed("stick does not fit in the container")
    r_off = 0.3 * room * math.sqrt(rng.uniform())
    a_off = rng.uniform(0.0, 2.0 * math.pi)
    lateral = r_off * np.array([math.cos(a_off), math.sin(a_off), 0.0])
    plane = _part_in_obj(anchor, "bottom", ca)[:, 2].mean()
    tip = (rot @ (function.part_points("tip") - cf).T).T
    gap = float(rng.uniform(*gen["place_touch_gap"]))
    t = base_a + lateral - rot @ base_f
    t[2] = plane + gap - tip[:, 2].min()
    end = Pose(rot, t)
    lift = a_pts[:, 2].max() - plane + float(rng.uniform(*gen["place_start_gap"]))
    start = Pose(rot, t + lift * EZ)
    free = {"spin": psi, "touch_gap": gap, "lateral": r_off, "start_lift": lift}
    return TrajectorySpec((start, end)), free


def _place_in_world(cloud: PointCloud, offset: np.ndarray) -> PointCloud:
    return PointCloud(cloud.points + offset, cloud.part_labels, cloud.vocabulary, cloud.category)


def gen_demonstration(
    task: TaskDefinition,
    anchor_spec: ObjectSpec,
    function_spec: ObjectSpec,
    rng: np.random.Generator,
    table: CategoryTable | None = None,
    demo_id: str = "demo",
    seed: int = 0,
) -> Demonstration:
    """Ground-truth start/end poses built analytically, checked by the oracles."""
    table = table or default_table()
    kinds = (table.categories[anchor_spec.category]["kind"], table.categories[function_spec.category]["kind"])
    if task.name == "pour" and kinds != ("vessel", "vessel"):
        raise InvalidSpec("pour needs two vessels")
    if task.name == "place" and kinds != ("vessel", "stick"):
        raise InvalidSpec("place needs a container anchor and a stick function object")
    anchor_local = gen_object(anchor_spec, table, task.name)
    function_local = gen_object(function_spec, table, task.name)
    gen = table.generation
    for _ in range(gen["max_attempts"]):
        pa = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), 0.0])
        pf = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), 0.0])
        if np.linalg.norm(pa - pf) < 0.35:
            continue
        anchor = _place_in_world(anchor_local, pa)
        function = _place_in_world(function_local, pf)
        try:
            if task.name == "pour":
                poses, free = _pour_candidate(anchor, function, rng, gen)
            else:
                poses, free = _place_candidate(anchor, function, rng, gen, pa, pf, anchor_spec, function_spec)
        except PartMissing:
            continue
        if any(rotation_angle(p.rotation) > math.pi - 1e-3 for p in poses.poses):
            continue
        try:
            result = evaluate(task, anchor, function, poses, table.oracle)
        except PartMissing:
            continue
        if not result.success or result.overall < 95.0:
            continue
        free.update({"anchor_x": pa[0], "anchor_y": pa[1], "function_x": pf[0], "function_y": pf[1]})
        free = {k: float(v) for k, v in free.items()}
        return Demonstration(demo_id, task, anchor, function, poses, free, anchor_spec, function_spec, seed)
    raise GenerationFailed(
        f"no valid {task.name} demonstration for {anchor_spec.category}/{function_spec.category} "
        f"after {gen['max_attempts']} attempts"
    )


def record_id(task_name: str, master: int, index: int) -> str:
    return f"{task_name}-s{int(master)}-{int(index):06d}"


def gen_dataset_record(
    task_name: str,
    master: int,
    index: int,
    table: CategoryTable | None = None,
    function_families: tuple | None = None,
) -> Demonstration:
    """One dataset record from its own substream; retries fresh specs on failure."""
    from .seeding import substream_seed

    table = table or default_table()
    task = get_task(task_name)
    seed = substream_seed(master, f"demo/{task_name}", index)
    rng = np.random.default_rng(seed)
    anchors = table.families(task_name, "anchor")
    functions = function_families or table.families(task_name, "function")
    last = None
    for _ in range(20):
        a_cat = anchors[int(rng.integers(len(anchors)))]
        f_cat = functions[int(rng.integers(len(functions)))]
        a_spec = sample_object_spec(a_cat, rng, table)
        f_spec = sample_object_spec(f_cat, rng, table)
        try:
            return gen_demonstration(task, a_spec, f_spec, rng, table, record_id(task_name, master, index), seed)
        except GenerationFailed as exc:
            last = exc
    raise GenerationFailed(f"record {index}: {last}")
