"""Forward-camera rasterizer: 90-degree FOV column raycaster, 112x112 RGB.

Walls and door panels are full-height slabs; baskets and the adversary are
short discs projected onto the floor plane. A disc whose full extent lies
within the blind radius of the robot is not drawn at all (the near-field
camera cutoff); walls are always visible. Flat per-class colors with a
deterministic distance shade; output is quantized to uint8 so stored frames
reproduce bit-exactly.
"""

from __future__ import annotations

import math

import numpy as np

from .world import WorldState

WIDTH = 112
HEIGHT = 112
FOV = math.pi / 2
HORIZON = HEIGHT // 2
CAM_HEIGHT = 0.55

COLORS = {
    "sky": (0.82, 0.87, 0.93),
    "floor": (0.45, 0.43, 0.40),
    "wall": (0.55, 0.58, 0.66),
    "car_wall": (0.44, 0.46, 0.54),
    "door": (0.85, 0.47, 0.10),
    "basket": (0.82, 0.16, 0.12),
    "adversary": (0.12, 0.66, 0.28),
}

HEIGHTS = {
    "wall": 1.9,
    "car_wall": 1.9,
    "door": 1.9,
    "basket": 0.22,
    "adversary": 1.6,
}

_BEARINGS = np.linspace(FOV / 2, -FOV / 2, WIDTH)  # column 0 = leftmost
_COS_BEAR = np.cos(_BEARINGS)


def _segment_hits(px, py, dx, dy, segs: np.ndarray) -> np.ndarray:
    """Ray-parameter t for each (ray, segment) pair; inf where no hit."""
    ax, ay = segs[:, 0], segs[:, 1]
    abx, aby = segs[:, 2] - ax, segs[:, 3] - ay
    denom = dx[:, None] * aby[None, :] - dy[:, None] * abx[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_x = ax[None, :] - px
        rel_y = ay[None, :] - py
        t = (rel_x * aby[None, :] - rel_y * abx[None, :]) / denom
        s = (rel_x * dy[:, None] - rel_y * dx[:, None]) / denom
    ok = (np.abs(denom) > 1e-12) & (t > 1e-6) & (s >= -1e-9) & (s <= 1.0 + 1e-9)
    return np.where(ok, t, np.inf)


def _circle_hits(px, py, dx, dy, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    ocx = px - centers[:, 0]
    ocy = py - centers[:, 1]
    b = dx[:, None] * ocx[None, :] + dy[:, None] * ocy[None, :]
    c = (ocx * ocx + ocy * ocy)[None, :] - (radii * radii)[None, :]
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(disc)
    ok = (disc >= 0) & (t > 1e-6)
    return np.where(ok, t, np.inf)


def render_bytes(world: WorldState) -> np.ndarray:
    """Rasterize the forward view as uint8 planes (3, H, W)."""
    px, py, th = world.x, world.y, world.theta
    dx = np.cos(th + _BEARINGS)
    dy = np.sin(th + _BEARINGS)

    img = np.empty((HEIGHT, WIDTH, 3))
    img[:HORIZON] = COLORS["sky"]
    img[HORIZON:] = COLORS["floor"]

    rows = np.arange(HEIGHT)[:, None]

    walls = world.active_walls()
    wall_t = np.full(WIDTH, np.inf)
    if walls:
        segs = np.array([w.as_array() for w in walls])
        kinds = [w.kind for w in walls]
        t_all = _segment_hits(px, py, dx, dy, segs)
        idx = np.argmin(t_all, axis=1)
        wall_t = t_all[np.arange(WIDTH), idx]
        wall_colors = np.array([COLORS[k] for k in kinds])[idx]
        wall_heights = np.array([HEIGHTS[k] for k in kinds])[idx]
        _paint(img, rows, wall_t, wall_heights, wall_colors, np.isfinite(wall_t))

    discs = []
    for b in world.baskets:
        discs.append((b.x, b.y, b.radius, "basket"))
    if world.adversary is not None:
        a = world.adversary
        discs.append((a.x, a.y, a.radius, "adversary"))
    if discs:
        centers = np.array([(d[0], d[1]) for d in discs])
        radii = np.array([d[2] for d in discs])
        dist = np.hypot(centers[:, 0] - px, centers[:, 1] - py)
        visible = dist + radii > world.blind_radius  # blind-spot cutoff
        if visible.any():
            centers, radii = centers[visible], radii[visible]
            names = [d[3] for d, v in zip(discs, visible) if v]
            t_all = _circle_hits(px, py, dx, dy, centers, radii)
            idx = np.argmin(t_all, axis=1)
            ent_t = t_all[np.arange(WIDTH), idx]
            ent_colors = np.array([COLORS[n] for n in names])[idx]
            ent_heights = np.array([HEIGHTS[n] for n in names])[idx]
            _paint(img, rows, ent_t, ent_heights, ent_colors,
                   np.isfinite(ent_t) & (ent_t < wall_t))

    out = np.round(img * 255.0).astype(np.uint8)
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def _paint(img, rows, t, heights, colors, active):
    """Paint vertical slices for hits at ray distance t with given heights."""
    d = np.where(active, t * _COS_BEAR, np.inf)  # fisheye-corrected depth
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        floor_row = HORIZON + HORIZON * (CAM_HEIGHT / d)
        top_row = HORIZON + HORIZON * (CAM_HEIGHT - heights) / d
        shade = np.clip(1.12 / (1.0 + 0.14 * d), 0.28, 1.0)
    r0 = np.ceil(np.clip(top_row, 0, HEIGHT)).astype(int)
    r1 = np.floor(np.clip(floor_row, -1, HEIGHT - 1)).astype(int)
    mask = active[None, :] & (rows >= r0[None, :]) & (rows <= r1[None, :])
    shaded = colors * shade[:, None]
    img[mask] = shaded[np.nonzero(mask)[1]]


def render(world: WorldState) -> np.ndarray:
    """Observation as float RGB planes in [0, 1] (multiples of 1/255)."""
    return render_bytes(world).astype(np.float64) / 255.0
