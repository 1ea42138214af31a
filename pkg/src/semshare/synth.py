"""Ground-truth generators: random-perspective flow samples, a dual-camera
scene simulator with exact correspondences, and score degradation.

The scene world frame coincides with the wide camera frame: origin at the
wide camera's center, x right, y down, z forward (meters).  The narrow
camera sits at `baseline` meters from the wide one and is rotated by the
rig's wide-to-narrow rotation.  The rig itself stays rotation-only: the
baseline is deliberately invisible to the calibrated warp stage, which is
what creates the depth-dependent residual the flow stage has to absorb.

Scene content is desk-scale: a checkerboard-textured ground plane (class
"road"), fronto-parallel textured billboards standing on the ground
(classes person/car/barrier/cycle) and a textured background at infinity
(class "background").  Everything is a pure function of (inputs, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import CameraRig, Intrinsics, Rotation3, rig_from_text, rig_to_text
from .errors import ConfigError, DataError
from .flow import _sample_clamped
from .raster import FlowField, GridMap, Image, LabelMap, ScoreMap

CLASS_NAMES = ("background", "road", "person", "car", "barrier", "cycle")
NUM_CLASSES = len(CLASS_NAMES)

_EPS = 1e-9


# ---------------------------------------------------------------------------
# Procedural texture


def value_noise(xs, ys, seed: int, scale: float) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [0, 1] at arbitrary float
    coordinates (lattice wraps, so any coordinate range is fine)."""
    rng = np.random.default_rng(seed)
    lattice = rng.random((64, 64))
    gx = np.asarray(xs, dtype=float) / scale
    gy = np.asarray(ys, dtype=float) / scale
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = gx - x0
    fy = gy - y0
    fx = fx * fx * (3.0 - 2.0 * fx)
    fy = fy * fy * (3.0 - 2.0 * fy)
    x0 %= 64
    y0 %= 64
    x1 = (x0 + 1) % 64
    y1 = (y0 + 1) % 64
    top = (1.0 - fx) * lattice[y0, x0] + fx * lattice[y0, x1]
    bot = (1.0 - fx) * lattice[y1, x0] + fx * lattice[y1, x1]
    return (1.0 - fy) * top + fy * bot


def texture_image(size, seed: int, octaves=((32.0, 0.5), (16.0, 0.3), (8.0, 0.2))) -> Image:
    """Multi-octave value-noise image, normalized to span [0, 1]."""
    w, h = size
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    out = np.zeros((h, w))
    for k, (scale, amp) in enumerate(octaves):
        out += amp * value_noise(xs, ys, seed * 7919 + k, scale)
    lo, hi = out.min(), out.max()
    if hi > lo:
        out = (out - lo) / (hi - lo)
    return Image(out[None])


# ---------------------------------------------------------------------------
# Random-perspective flow samples


@dataclass(frozen=True)
class RandomTransformSpec:
    """Sampling ranges for the synthetic warp: focal factor, per-axis
    translation in pixels, rotation in degrees, and the seed."""

    focal_range: tuple[float, float] = (0.95, 1.05)
    translation: float = 10.0
    rotation_deg: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.focal_range[0] <= self.focal_range[1]):
            raise ConfigError(f"bad focal range {self.focal_range}")
        if self.translation < 0.0 or self.rotation_deg < 0.0:
            raise ConfigError("translation/rotation ranges must be non-negative")


def _backward_matrix(size, focal_factor, tx, ty, theta_deg) -> np.ndarray:
    """Backward pixel map: zoom about the image center, rotate about the
    center, then translate.  source(p) = B @ p."""
    w, h = size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    th = math.radians(theta_deg)
    c, s = math.cos(th), math.sin(th)

    def trans(x, y):
        return np.array([[1.0, 0.0, x], [0.0, 1.0, y], [0.0, 0.0, 1.0]])

    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    zoom = np.diag([focal_factor, focal_factor, 1.0])
    return trans(tx, ty) @ trans(cx, cy) @ rot @ zoom @ trans(-cx, -cy)


def flow_sample_from_params(img: Image, focal_factor, tx, ty, theta_deg):
    """Deterministic core of gen_flow_sample for explicit parameters.

    Returns (warped image, ground-truth backward flow, validity mask).
    The warped image is sampled with replicate-clamped coordinates so the
    out-of-view band carries extended edge texture rather than a fake hard
    edge; the mask marks the in-bounds pixels where the flow is meaningful.
    """
    w, h = img.size
    b = _backward_matrix((w, h), focal_factor, tx, ty, theta_deg)
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    denom = b[2, 0] * xs + b[2, 1] * ys + b[2, 2]
    sx = (b[0, 0] * xs + b[0, 1] * ys + b[0, 2]) / denom
    sy = (b[1, 0] * xs + b[1, 1] * ys + b[1, 2]) / denom
    flow = FlowField(np.stack([sx - xs, sy - ys]))
    mask = (sx >= 0.0) & (sx <= w - 1.0) & (sy >= 0.0) & (sy <= h - 1.0)
    warped = np.stack([_sample_clamped(img.data[c], sx, sy) for c in range(img.channels)])
    return Image(np.clip(warped, 0.0, 1.0)), flow, mask


def gen_flow_sample(img: Image, spec: RandomTransformSpec):
    """Sample (focal factor, translation, rotation) from the spec's ranges
    and warp the image; the flow generated along the way is the ground
    truth."""
    rng = np.random.default_rng(spec.seed)
    focal = rng.uniform(spec.focal_range[0], spec.focal_range[1])
    tx = rng.uniform(-spec.translation, spec.translation)
    ty = rng.uniform(-spec.translation, spec.translation)
    theta = rng.uniform(-spec.rotation_deg, spec.rotation_deg)
    return flow_sample_from_params(img, focal, tx, ty, theta)


# ---------------------------------------------------------------------------
# Dual-camera scenes


@dataclass(frozen=True)
class Box:
    """Fronto-parallel billboard standing on the ground plane."""

    depth: float  # meters along +z
    x_center: float  # meters
    width: float
    height: float
    class_id: int
    texture_seed: int

    def __post_init__(self):
        if self.depth <= 0.0:
            raise ConfigError(f"box depth must be positive, got {self.depth}")
        if self.width <= 0.0 or self.height <= 0.0:
            raise ConfigError("box extent must be positive")
        if not 2 <= self.class_id < NUM_CLASSES:
            raise ConfigError(f"box class must be an obstacle class, got {self.class_id}")


@dataclass(frozen=True)
class SynthScene:
    rig: CameraRig
    baseline: tuple[float, float, float]  # narrow camera center, meters
    ground_height: float  # camera height above the road, meters
    ground_cell: float  # checker cell size, meters
    boxes: tuple[Box, ...]
    texture_seed: int
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"scenes use the fixed {NUM_CLASSES}-class label set")
        if self.ground_height <= 0.0 or self.ground_cell <= 0.0:
            raise ConfigError("ground parameters must be positive")
        for box in self.boxes:
            self._check_box_visible(box)

    def _check_box_visible(self, box: Box) -> None:
        k = self.rig.cam_wide
        w, h = self.rig.image_size_wide
        y_top = self.ground_height - box.height
        for bx in (box.x_center - box.width / 2.0, box.x_center + box.width / 2.0):
            for by in (y_top, self.ground_height):
                u = k.fx * bx / box.depth + k.cx
                v = k.fy * by / box.depth + k.cy
                if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
                    raise ConfigError(
                        f"box at depth {box.depth} leaves the wide view "
                        f"(corner projects to ({u:.1f}, {v:.1f}))"
                    )


@dataclass(frozen=True)
class ScenePair:
    """Rendered dual view plus the exact analytic correspondences.

    grid_to_narrow pulls wide pixels into the narrow frame (its validity
    is the narrow-frame overlap mask); grid_to_wide is the reverse map.
    Grid validity excludes pixels whose true surface point is occluded in
    the other view, since no correspondence exists there.
    """

    wide_image: Image
    wide_labels: LabelMap
    narrow_image: Image
    narrow_labels: LabelMap
    grid_to_narrow: GridMap
    grid_to_wide: GridMap

    @property
    def overlap_narrow(self) -> np.ndarray:
        return self.grid_to_narrow.valid

    @property
    def overlap_wide(self) -> np.ndarray:
        return self.grid_to_wide.valid


def _view_rays(cam: Intrinsics, size, rotation: np.ndarray):
    """World-frame ray directions for every pixel of one camera."""
    w, h = size
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    dir_cam = np.stack(
        [
            (xs - cam.cx - cam.skew * (ys - cam.cy) / cam.fy) / cam.fx,
            (ys - cam.cy) / cam.fy,
            np.ones_like(xs),
        ]
    )
    return np.einsum("ij,jhw->ihw", rotation.T, dir_cam)


def _render_view(scene: SynthScene, cam: Intrinsics, size, rotation, center):
    """Ray-cast one camera: returns intensity, labels, world hit points
    (inf for the background) and per-pixel depth in the camera's own frame."""
    w, h = size
    dirs = _view_rays(cam, size, rotation)
    dx, dy, dz = dirs
    cx3, cy3, cz3 = center

    t_hit = np.full((h, w), np.inf)
    labels = np.zeros((h, w), dtype=np.int32)
    intensity = np.empty((h, w))

    # background at infinity: texture over ray direction
    norm = np.sqrt(dx * dx + dy * dy + dz * dz)
    bg_noise = value_noise(dx / norm * 64.0, dy / norm * 64.0, scene.texture_seed + 17, 9.0)
    intensity[:] = 0.55 + 0.3 * (bg_noise - 0.5)

    # ground plane y = ground_height
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = (scene.ground_height - cy3) / dy
    gx = cx3 + t_ground * dx
    gz = cz3 + t_ground * dz
    ground_ok = (dy > _EPS) & (t_ground > 0.0) & (gz > 0.0)
    checker = ((np.floor(gx / scene.ground_cell) + np.floor(gz / scene.ground_cell)) % 2.0) * 2.0 - 1.0
    fade = 1.0 / (1.0 + np.maximum(gz, 0.0) / 25.0)
    g_noise = value_noise(gx * 4.0, gz * 4.0, scene.texture_seed + 29, 3.0)
    ground_val = 0.5 + 0.17 * checker * fade + 0.12 * (g_noise - 0.5)
    place = ground_ok & (t_ground < t_hit)
    t_hit = np.where(place, t_ground, t_hit)
    labels = np.where(place, 1, labels)
    intensity = np.where(place, ground_val, intensity)

    for box in scene.boxes:
        with np.errstate(divide="ignore", invalid="ignore"):
            t_box = (box.depth - cz3) / dz
        bx = cx3 + t_box * dx
        by = cy3 + t_box * dy
        inside = (
            (dz > _EPS)
            & (t_box > 0.0)
            & (np.abs(bx - box.x_center) <= box.width / 2.0)
            & (by <= scene.ground_height)
            & (by >= scene.ground_height - box.height)
        )
        rng = np.random.default_rng(box.texture_seed)
        base = 0.35 + 0.4 * rng.random()
        b_noise = value_noise(bx * 24.0, by * 24.0, box.texture_seed + 41, 5.0)
        box_val = base + 0.24 * (b_noise - 0.5)
        place = inside & (t_box < t_hit)
        t_hit = np.where(place, t_box, t_hit)
        labels = np.where(place, box.class_id, labels)
        intensity = np.where(place, box_val, intensity)

    finite = np.isfinite(t_hit)
    t_safe = np.where(finite, t_hit, 0.0)
    points = np.stack(
        [
            np.where(finite, cx3 + t_safe * dx, np.inf),
            np.where(finite, cy3 + t_safe * dy, np.inf),
            np.where(finite, cz3 + t_safe * dz, np.inf),
        ]
    )
    # depth in the camera's own frame (z after world->camera rotation)
    own_z = np.where(
        finite,
        t_safe * (rotation[2, 0] * dx + rotation[2, 1] * dy + rotation[2, 2] * dz),
        np.inf,
    )
    image = Image(np.clip(intensity, 0.0, 1.0)[None])
    return image, LabelMap(labels, scene.num_classes), points, own_z, dirs


def _correspondence_grid(
    points, dirs, src_cam: Intrinsics, src_size, src_rotation, src_center, src_depth
):
    """Project one view's hit points into the other camera and validate
    bounds plus visibility against that camera's depth map."""
    w, h = src_size
    finite = np.isfinite(points[2])
    rel = np.stack(
        [
            np.where(finite, points[0] - src_center[0], dirs[0]),
            np.where(finite, points[1] - src_center[1], dirs[1]),
            np.where(finite, points[2] - src_center[2], dirs[2]),
        ]
    )
    cam_pt = np.einsum("ij,jhw->ihw", src_rotation, rel)
    in_front = cam_pt[2] > _EPS
    z = np.where(in_front, cam_pt[2], 1.0)
    u = (src_cam.fx * cam_pt[0] + src_cam.skew * cam_pt[1]) / z + src_cam.cx
    v = src_cam.fy * cam_pt[1] / z + src_cam.cy
    # border tolerance absorbs reprojection round-off at the exact edge
    tol = 1e-6
    in_bounds = in_front & (u >= -tol) & (u <= w - 1 + tol) & (v >= -tol) & (v <= h - 1 + tol)
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)

    iu = np.clip(np.rint(u), 0, w - 1).astype(np.int64)
    iv = np.clip(np.rint(v), 0, h - 1).astype(np.int64)
    seen_depth = src_depth[iv, iu]
    own_depth = np.where(finite, cam_pt[2], np.inf)
    visible = seen_depth >= own_depth * (1.0 - 1e-3)
    valid = in_bounds & visible
    return GridMap(np.where(valid, u, 0.0), np.where(valid, v, 0.0), valid, src_size)


def render_scene(scene: SynthScene) -> ScenePair:
    """Rasterize both cameras and compute exact per-pixel correspondences
    from the true scene depth (not the planar homography)."""
    if not scene.boxes and scene.ground_height <= 0:
        raise ConfigError("scene has no content")
    rig = scene.rig
    r_narrow = rig.rotation_wide_to_narrow.r
    base = np.asarray(scene.baseline, dtype=float)

    wide_img, wide_labels, wide_pts, wide_depth, wide_dirs = _render_view(
        scene, rig.cam_wide, rig.image_size_wide, np.eye(3), np.zeros(3)
    )
    narrow_img, narrow_labels, narrow_pts, narrow_depth, narrow_dirs = _render_view(
        scene, rig.cam_narrow, rig.image_size_narrow, r_narrow, base
    )

    grid_to_narrow = _correspondence_grid(
        narrow_pts, narrow_dirs, rig.cam_wide, rig.image_size_wide,
        np.eye(3), np.zeros(3), wide_depth,
    )
    grid_to_wide = _correspondence_grid(
        wide_pts, wide_dirs, rig.cam_narrow, rig.image_size_narrow,
        r_narrow, base, narrow_depth,
    )
    return ScenePair(
        wide_image=wide_img,
        wide_labels=wide_labels,
        narrow_image=narrow_img,
        narrow_labels=narrow_labels,
        grid_to_narrow=grid_to_narrow,
        grid_to_wide=grid_to_wide,
    )


# ---------------------------------------------------------------------------
# Score degradation: synthetic "segmentation network" outputs


def degrade_scores(
    gt: LabelMap, margin: float = 1.0, sigma: float = 0.0, blur: int = 0, seed: int = 0
) -> ScoreMap:
    """One-hot scores scaled by `margin`, boundary-softened by `blur`
    passes of a 3-tap binomial kernel per axis, plus seeded Gaussian noise."""
    if margin <= 0.0 or sigma < 0.0 or blur < 0:
        raise ConfigError("margin must be positive, sigma/blur non-negative")
    scores = gt.one_hot(margin).data.copy()
    for _ in range(blur):
        padded = np.pad(scores, ((0, 0), (0, 0), (1, 1)), mode="edge")
        scores = 0.25 * padded[:, :, :-2] + 0.5 * padded[:, :, 1:-1] + 0.25 * padded[:, :, 2:]
        padded = np.pad(scores, ((0, 0), (1, 1), (0, 0)), mode="edge")
        scores = 0.25 * padded[:, :-2, :] + 0.5 * padded[:, 1:-1, :] + 0.25 * padded[:, 2:, :]
    if sigma > 0.0:
        rng = np.random.default_rng(seed)
        scores = scores + sigma * rng.standard_normal(scores.shape)
    return ScoreMap(scores)


# ---------------------------------------------------------------------------
# Scene description files and procedural scene construction


def scene_to_text(scene: SynthScene) -> str:
    lines = ["# semshare scene"]
    lines.append(rig_to_text(scene.rig).strip())
    lines.append("baseline " + " ".join(repr(float(v)) for v in scene.baseline))
    lines.append(f"ground.height {float(scene.ground_height)!r}")
    lines.append(f"ground.cell {float(scene.ground_cell)!r}")
    lines.append(f"texture_seed {scene.texture_seed}")
    lines.append(f"num_classes {scene.num_classes}")
    for b in scene.boxes:
        lines.append(
            f"box {float(b.depth)!r} {float(b.x_center)!r} {float(b.width)!r} "
            f"{float(b.height)!r} {b.class_id} {b.texture_seed}"
        )
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> SynthScene:
    rig_lines = []
    own: dict[str, list[str]] = {}
    boxes = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key = line.split()[0]
        if key.startswith(("narrow.", "wide.", "rotation")):
            rig_lines.append(line)
        elif key == "box":
            parts = line.split()
            if len(parts) != 7:
                raise DataError(f"malformed box line: {line!r}")
            boxes.append(
                Box(
                    depth=float(parts[1]),
                    x_center=float(parts[2]),
                    width=float(parts[3]),
                    height=float(parts[4]),
                    class_id=int(parts[5]),
                    texture_seed=int(parts[6]),
                )
            )
        else:
            own[key] = line.split()[1:]

    def take(key, count):
        if key not in own or len(own[key]) != count:
            raise DataError(f"scene file is missing or malforms key '{key}'")
        return own.pop(key)

    try:
        baseline = tuple(float(v) for v in take("baseline", 3))
        height = float(take("ground.height", 1)[0])
        cell = float(take("ground.cell", 1)[0])
        tex_seed = int(take("texture_seed", 1)[0])
        num_classes = int(take("num_classes", 1)[0])
    except ValueError as exc:
        raise DataError(f"scene file has a malformed number: {exc}") from exc
    if own:
        raise DataError(f"scene file has unknown keys: {sorted(own)}")
    return SynthScene(
        rig=rig_from_text("\n".join(rig_lines)),
        baseline=baseline,
        ground_height=height,
        ground_cell=cell,
        boxes=tuple(boxes),
        texture_seed=tex_seed,
        num_classes=num_classes,
    )


def write_scene(scene: SynthScene, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(scene_to_text(scene))


def read_scene(path) -> SynthScene:
    with open(path, "r", encoding="ascii") as f:
        return scene_from_text(f.read())


def default_rig(size=(192, 192), yaw_deg: float = 1.5) -> CameraRig:
    """Wide camera with ~90 degree HFoV, narrow with twice the focal, both
    sharing the image center; narrow yawed slightly off the wide axis."""
    w, h = size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    wide = Intrinsics(fx=w / 2.0, fy=w / 2.0, cx=cx, cy=cy)
    narrow = Intrinsics(fx=float(w), fy=float(w), cx=cx, cy=cy)
    rot = Rotation3.axis_angle((0.0, 1.0, 0.0), math.radians(yaw_deg))
    return CameraRig(
        cam_narrow=narrow,
        cam_wide=wide,
        rotation_wide_to_narrow=rot,
        image_size_narrow=size,
        image_size_wide=size,
    )


def make_scene(seed: int, size=(192, 192), planar: bool = False) -> SynthScene:
    """Procedural benchmark scene, deterministic in the seed.

    Non-planar scenes stand 4 boxes (one per obstacle class) at distinct
    depths; planar scenes keep only the ground plane and background.
    """
    rng = np.random.default_rng(seed)
    yaw = rng.uniform(-2.0, 2.0)
    rig = default_rig(size, yaw_deg=yaw)
    baseline = (float(rng.uniform(0.10, 0.16)), 0.0, 0.0)
    ground_height = float(rng.uniform(1.4, 1.7))
    ground_cell = float(rng.uniform(0.6, 0.9))
    boxes = []
    if not planar:
        classes = rng.permutation([2, 3, 4, 5])
        depths = np.sort(rng.uniform(4.0, 12.0, size=4))
        # distinct angular lanes keep the boxes from occluding each other
        lanes = rng.permutation([-0.3, -0.11, 0.08, 0.27])
        for class_id, depth, lane in zip(classes, depths, lanes):
            depth = float(depth)
            x_center = float((lane + rng.uniform(-0.015, 0.015)) * depth)
            width = float(rng.uniform(0.7, 1.0) + depth / 12.0)
            height = float(rng.uniform(1.2, 1.9))
            boxes.append(
                Box(
                    depth=depth,
                    x_center=x_center,
                    width=width,
                    height=min(height, ground_height - 0.05),
                    class_id=int(class_id),
                    texture_seed=int(rng.integers(1 << 31)),
                )
            )
    return SynthScene(
        rig=rig,
        baseline=baseline,
        ground_height=ground_height,
        ground_cell=ground_cell,
        boxes=tuple(boxes),
        texture_seed=int(rng.integers(1 << 31)),
    )
