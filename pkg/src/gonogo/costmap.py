"""GO/NO-GO costmap: accumulate NOGO observations on a byte grid, inflate
around lethal cells, plan with A*, and drive a closed-loop simulated mission.

Cost convention: 0 free .. 254 lethal (byte grid, ROS-style ceiling).  GO
observations never lower costs; they only record free-space evidence in the
provenance counts.
"""

import heapq
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .scenes import VISIBLE_DISTANCE, SceneParams, render_scene

LETHAL = 254


class Costmap:
    """Byte cost grid with per-cell observation counts.

    `cells[y, x]` holds the cost; `origin` is the world position of the
    outer corner of cell (0, 0).
    """

    def __init__(self, width, height, resolution, origin=(0.0, 0.0)):
        if width < 1 or height < 1:
            raise ValueError(f"grid must be at least 1x1, got {width}x{height}")
        if not (np.isfinite(resolution) and resolution > 0):
            raise ValueError(f"resolution must be positive, got {resolution}")
        if not all(np.isfinite(v) for v in origin):
            raise ValueError(f"origin must be finite, got {origin}")
        self.width, self.height = int(width), int(height)
        self.resolution = float(resolution)
        self.origin = (float(origin[0]), float(origin[1]))
        self.cells = np.zeros((self.height, self.width), dtype=np.uint8)
        self.provenance = np.zeros((self.height, self.width), dtype=np.int32)

    def world_to_cell(self, x, y):
        cx = int(math.floor((x - self.origin[0]) / self.resolution + 1e-9))
        cy = int(math.floor((y - self.origin[1]) / self.resolution + 1e-9))
        return cx, cy

    def cell_center(self, cx, cy):
        return (self.origin[0] + (cx + 0.5) * self.resolution,
                self.origin[1] + (cy + 0.5) * self.resolution)

    def in_bounds(self, cx, cy):
        return 0 <= cx < self.width and 0 <= cy < self.height


def _bresenham(x0, y0, x1, y1):
    """Integer line cells from (x0,y0) to (x1,y1), inclusive."""
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    out = []
    while True:
        out.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def mark_observation(m: Costmap, pose, decision, range_m):
    """Fold one classified view into the map.

    NOGO writes a lethal cell `range_m` ahead of the pose along its heading
    (skipped silently if that lands outside the grid); GO leaves costs alone
    and increments provenance along the view ray.  A pose outside the grid
    is a warned no-op.
    """
    x, y, heading = pose
    px, py = m.world_to_cell(x, y)
    if not m.in_bounds(px, py):
        warnings.warn(f"observation pose ({x:.2f}, {y:.2f}) outside the map; ignored")
        return m
    tx = x + range_m * math.cos(heading)
    ty = y + range_m * math.sin(heading)
    cx, cy = m.world_to_cell(tx, ty)
    if decision == "NOGO":
        if m.in_bounds(cx, cy):
            m.cells[cy, cx] = LETHAL
            m.provenance[cy, cx] += 1
    elif decision == "GO":
        for rx, ry in _bresenham(px, py, cx, cy):
            if m.in_bounds(rx, ry):
                m.provenance[ry, rx] += 1
    else:
        raise ValueError(f"decision must be GO or NOGO, got {decision!r}")
    return m


def inflate(m: Costmap, radius_m):
    """Linear cost decay around lethal cells: max(existing,
    round_half_away(253 * (1 - d/radius))) for d <= radius.

    Max semantics make repeated inflation idempotent.
    """
    if radius_m < 0:
        raise ValueError(f"radius must be >= 0, got {radius_m}")
    lethal = m.cells == LETHAL
    if radius_m == 0 or not lethal.any():
        return m
    from scipy.ndimage import distance_transform_edt

    d_m = distance_transform_edt(~lethal) * m.resolution
    decay = np.floor(253.0 * (1.0 - d_m / radius_m) + 0.5)  # round half away; args >= 0
    band = (d_m <= radius_m) & ~lethal
    m.cells[band] = np.maximum(m.cells[band], decay[band].astype(np.uint8))
    return m


@dataclass
class PlanRequest:
    start: tuple
    goal: tuple
    lethal_cutoff: int = 200
    cost_weight: float = 1.0

    def __post_init__(self):
        if not 0 < self.lethal_cutoff <= LETHAL:
            raise ValueError(f"lethal_cutoff must be in (0, {LETHAL}], "
                             f"got {self.lethal_cutoff}")
        if self.cost_weight < 0:
            raise ValueError("cost_weight must be >= 0")


_STEPS = [(dx, dy, math.hypot(dx, dy))
          for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)]


def plan(m: Costmap, req: PlanRequest):
    """A* on the 8-connected grid; returns [(x, y), ...] or None.

    Edge cost into a cell is step length plus cost_weight * cost/254, so the
    Euclidean heuristic stays admissible.  Cells at or above lethal_cutoff
    are impassable; the returned path is re-checked against that before it
    leaves this function.
    """
    sx, sy = req.start
    gx, gy = req.goal
    for name, (cx, cy) in (("start", (sx, sy)), ("goal", (gx, gy))):
        if not m.in_bounds(cx, cy):
            raise ValueError(f"{name} cell {(cx, cy)} out of bounds")
    blocked = m.cells >= req.lethal_cutoff
    if blocked[sy, sx] or blocked[gy, gx]:
        return None
    cost_of = m.cells.astype(np.float64) * (req.cost_weight / 254.0)
    g = np.full((m.height, m.width), np.inf)
    parent = np.full((m.height, m.width), -1, dtype=np.int64)
    g[sy, sx] = 0.0
    tie = 0
    frontier = [(math.hypot(gx - sx, gy - sy), 0, sx, sy)]
    while frontier:
        f, _, x, y = heapq.heappop(frontier)
        if (x, y) == (gx, gy):
            break
        if f - math.hypot(gx - x, gy - y) > g[y, x] + 1e-12:
            continue  # stale entry
        for dx, dy, step in _STEPS:
            nx, ny = x + dx, y + dy
            if not m.in_bounds(nx, ny) or blocked[ny, nx]:
                continue
            cand = g[y, x] + step + cost_of[ny, nx]
            if cand < g[ny, nx]:
                g[ny, nx] = cand
                parent[ny, nx] = y * m.width + x
                tie += 1
                heapq.heappush(frontier, (cand + math.hypot(gx - nx, gy - ny),
                                          tie, nx, ny))
    if not np.isfinite(g[gy, gx]):
        return None
    path = [(gx, gy)]
    while path[-1] != (sx, sy):
        p = parent[path[-1][1], path[-1][0]]
        path.append((int(p % m.width), int(p // m.width)))
    path.reverse()
    assert not any(blocked[y, x] for x, y in path), "planner produced a lethal cell"
    return path


def path_cost(m: Costmap, path, cost_weight=1.0):
    """Edge-sum of a path under plan()'s metric (start cell costs nothing)."""
    total = 0.0
    for (x0, y0), (x1, y1) in zip(path, path[1:]):
        total += math.hypot(x1 - x0, y1 - y0) + cost_weight * m.cells[y1, x1] / 254.0
    return total


def export_map(m: Costmap, path_prefix, lethal_cutoff=200):
    """Write <prefix>.pgm (gray = 254 - cost) and <prefix>.meta."""
    from .imageio import write_pgm

    gray = (LETHAL - m.cells.astype(np.int16)).astype(np.uint8)
    write_pgm(f"{path_prefix}.pgm", gray,
              comment="gonogo costmap; gray = 254 - cost, black = lethal")
    with open(f"{path_prefix}.meta", "w") as fh:
        fh.write(f"resolution {m.resolution!r}\n")
        fh.write(f"origin {m.origin[0]!r} {m.origin[1]!r}\n")
        fh.write(f"lethal_cutoff {lethal_cutoff}\n")
    return (f"{path_prefix}.pgm", f"{path_prefix}.meta")


def import_map(path_prefix):
    """Read an exported map back; returns (Costmap, lethal_cutoff)."""
    from .imageio import read_pgm

    gray = read_pgm(f"{path_prefix}.pgm")
    meta = {}
    with open(f"{path_prefix}.meta") as fh:
        for line in fh:
            key, *vals = line.split()
            meta[key] = vals
    m = Costmap(gray.shape[1], gray.shape[0], float(meta["resolution"][0]),
                (float(meta["origin"][0]), float(meta["origin"][1])))
    m.cells = (LETHAL - gray.astype(np.int16)).astype(np.uint8)
    return m, int(meta["lethal_cutoff"][0])


# -- closed-loop simulated mission -------------------------------------------


@dataclass
class MissionWorld:
    """Flat world with circular obstacles; views come from the scene renderer.

    The rendered view shows the obstacle whenever the heading ray hits one
    within the scene renderer's visibility distance, which is also what the
    ground-truth classifier keys on.
    """

    width_m: float = 6.0
    height_m: float = 4.0
    start: tuple = (0.5, 2.0)
    goal: tuple = (5.5, 2.0)
    obstacles: tuple = ((3.0, 2.0, 0.35),)
    kind: str = "obstacle"        # what blocked views look like: obstacle | edge
    seed: int = 0

    def __post_init__(self):
        for name, (x, y) in (("start", self.start), ("goal", self.goal)):
            if not (0 <= x <= self.width_m and 0 <= y <= self.height_m):
                raise ValueError(f"{name} {(x, y)} outside the world")
        if self.kind not in ("obstacle", "edge"):
            raise ValueError(f"blocked-view kind must be obstacle or edge, "
                             f"got {self.kind!r}")

    def ray_distance(self, pose):
        """Distance along the heading ray to the nearest obstacle, or inf."""
        x, y, heading = pose
        ux, uy = math.cos(heading), math.sin(heading)
        best = math.inf
        for ox, oy, r in self.obstacles:
            fx, fy = ox - x, oy - y
            along = fx * ux + fy * uy
            if along < 0:
                continue
            lat2 = (fx * fx + fy * fy) - along * along
            if lat2 > r * r:
                continue
            t = along - math.sqrt(r * r - lat2)
            if 0 <= t < best:
                best = t
        return best

    def render_view(self, pose, step, hw=(32, 32)):
        kind = self.kind if self.ray_distance(pose) <= VISIBLE_DISTANCE else "corridor"
        seed = int(np.random.SeedSequence([self.seed, 7, step]).generate_state(1)[0])
        img, _ = render_scene(SceneParams(seed=seed, kind=kind, hw=hw))
        return img


@dataclass
class MissionConfig:
    classifier: str = "stub"       # stub (world geometry) | score (anomaly models)
    nogo_distance: float = VISIBLE_DISTANCE   # stub NOGO iff ray hit within this
    range_m: float = 0.5           # where NOGO marks land, ahead of the pose
    inflate_radius_m: float = 0.3
    resolution: float = 0.1
    step_m: float = 0.25
    step_limit: int = 200
    goal_tolerance: float = 0.2
    lethal_cutoff: int = 200
    cost_weight: float = 1.0
    hw: tuple = (32, 32)

    def __post_init__(self):
        if self.classifier not in ("stub", "score"):
            raise ValueError(f"classifier must be stub or score, got {self.classifier!r}")
        for name in ("nogo_distance", "range_m", "resolution", "step_m",
                     "goal_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.step_limit < 1:
            raise ValueError("step_limit must be >= 1")


@dataclass
class MissionResult:
    map: Costmap
    path: list                 # final planned path in cell coordinates
    log: list                  # one dict per executed step
    reached: bool
    steps: int
    timed_out: bool = False
    no_path: bool = False


def drive_simulated_mission(world: MissionWorld, models, masks,
                            cfg: MissionConfig = None) -> MissionResult:
    """Close the loop: render, classify, mark, inflate, replan, advance.

    The map is replanned only after it changes (a NOGO mark plus inflation);
    the log records that as `replanned`.  Exceeding the step limit returns an
    explicit timeout result with the partial log.
    """
    cfg = cfg or MissionConfig()
    if cfg.classifier == "score":
        from .scoring import ScoringConfig, score

        gen, dis, inv = models
        scoring_cfg = ScoringConfig()

        def classify(view, pose):
            bd = score(view, gen, dis, inv, masks, scoring_cfg)
            return bd.t_d, float(bd.a)
    else:
        def classify(view, pose):
            hit = world.ray_distance(pose) <= cfg.nogo_distance
            return ("NOGO" if hit else "GO"), None

    m = Costmap(int(math.ceil(world.width_m / cfg.resolution)),
                int(math.ceil(world.height_m / cfg.resolution)), cfg.resolution)
    goal_cell = m.world_to_cell(*world.goal)
    gx_w, gy_w = world.goal
    x, y = world.start
    heading = math.atan2(gy_w - y, gx_w - x)

    def replan(from_xy):
        req = PlanRequest(m.world_to_cell(*from_xy), goal_cell,
                          lethal_cutoff=cfg.lethal_cutoff,
                          cost_weight=cfg.cost_weight)
        return plan(m, req)

    path = replan((x, y))
    if path is None:
        return MissionResult(m, [], [], reached=False, steps=0, no_path=True)
    waypoints = list(path[1:])
    log = []
    for step in range(cfg.step_limit):
        view = world.render_view((x, y, heading), step, hw=cfg.hw)
        decision, a = classify(view, (x, y, heading))
        mark_observation(m, (x, y, heading), decision, cfg.range_m)
        replanned = False
        if decision == "NOGO":
            inflate(m, cfg.inflate_radius_m)
            path = replan((x, y))
            replanned = True
            if path is None:
                log.append({"step": step, "pose": [x, y, heading],
                            "decision": decision, "A": a, "replanned": True})
                return MissionResult(m, [], log, reached=False, steps=step + 1,
                                     no_path=True)
            waypoints = list(path[1:])
        log.append({"step": step, "pose": [x, y, heading], "decision": decision,
                    "A": a, "replanned": replanned})
        if math.hypot(gx_w - x, gy_w - y) <= cfg.goal_tolerance:
            return MissionResult(m, path, log, reached=True, steps=step + 1)
        while waypoints:
            tx, ty = m.cell_center(*waypoints[0])
            if math.hypot(tx - x, ty - y) > 0.6 * cfg.resolution:
                break
            waypoints.pop(0)
        tx, ty = m.cell_center(*waypoints[0]) if waypoints else (gx_w, gy_w)
        heading = math.atan2(ty - y, tx - x)
        d = math.hypot(tx - x, ty - y)
        move = min(cfg.step_m, d) if d > 0 else 0.0
        x += move * math.cos(heading)
        y += move * math.sin(heading)
    return MissionResult(m, path, log, reached=False, steps=cfg.step_limit,
                         timed_out=True)
