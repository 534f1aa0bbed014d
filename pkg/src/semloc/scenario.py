"""Street-canyon scene synthesis: geometry, first-order ray paths, CFR.

A scenario is a static street layout (BS, UE grid, buildings, traffic
lanes); a scene is one snapshot of vehicle positions.  Links get a
direct path plus single-bounce specular reflections off building walls
and vehicle faces (image method), each kept only if unobstructed.  The
propagation-condition label distinguishes a clear direct path (LOS),
a direct path blocked only by vehicles (DNLOS) and one blocked by any
building (SNLOS).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299792458.0

LOS, DNLOS, SNLOS = 0, 1, 2
LABEL_NAMES = {LOS: "LOS", DNLOS: "DNLOS", SNLOS: "SNLOS"}

_SEG_EPS = 1e-9  # open-interval margin: endpoint touches do not count as hits


class EmptyLink(Exception):
    """No propagation path survives between BS and UE (full blockage)."""


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array; elements indexed (iy, iz), flattened iy-major."""

    m_y: int
    m_z: int
    spacing: float = 0.5  # in wavelengths

    def __post_init__(self):
        if self.m_y < 1 or self.m_z < 1:
            raise ValueError("array needs at least one element per axis")

    @property
    def size(self):
        return self.m_y * self.m_z


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, corners in meters."""

    lo: tuple
    hi: tuple

    def as_arrays(self):
        return np.asarray(self.lo, float), np.asarray(self.hi, float)


@dataclass(frozen=True)
class Lane:
    """A straight traffic lane along the x axis."""

    y_center: float
    x_min: float
    x_max: float
    density: float = 0.08        # expected vehicles per meter of lane
    truck_fraction: float = 0.35


# vehicle types: (length, width, height) in meters
_VEHICLE_SIZES = {"sedan": (4.5, 1.8, 1.5), "truck": (8.0, 2.5, 2.9)}


@dataclass
class Scenario:
    bs_position: tuple
    array: ArrayGeometry
    carrier_freq: float
    bandwidth: float
    n_subcarriers: int
    ue_grid: np.ndarray              # [L, 3] meters
    grid_spacing: float
    buildings: list = field(default_factory=list)   # list[Box]
    lanes: list = field(default_factory=list)       # list[Lane]
    max_paths: int = 25
    min_paths: int | None = None     # if set, P ~ Uniform{min_paths..max_paths}
    reflection_coeff: float = 0.6
    traffic_drift: float = 0.0       # relative density increase over the scene axis
    noise_snr_db: float | None = None

    def __post_init__(self):
        self.ue_grid = np.asarray(self.ue_grid, float)
        if self.n_subcarriers < 2:
            raise ValueError("need at least two subcarriers")
        if not self.carrier_freq > self.bandwidth > 0:
            raise ValueError("require carrier_freq > bandwidth > 0")

    @property
    def wavelength(self):
        return SPEED_OF_LIGHT / self.carrier_freq

    def subcarrier_freqs(self):
        fc, b = self.carrier_freq, self.bandwidth
        return np.linspace(fc - b / 2.0, fc + b / 2.0, self.n_subcarriers)

    # -- JSON round trip -------------------------------------------------
    def to_dict(self):
        return {
            "bs_position": list(self.bs_position),
            "array": {"m_y": self.array.m_y, "m_z": self.array.m_z,
                      "spacing": self.array.spacing},
            "carrier_freq": self.carrier_freq,
            "bandwidth": self.bandwidth,
            "n_subcarriers": self.n_subcarriers,
            "ue_grid": self.ue_grid.tolist(),
            "grid_spacing": self.grid_spacing,
            "buildings": [{"lo": list(b.lo), "hi": list(b.hi)} for b in self.buildings],
            "lanes": [{"y_center": l.y_center, "x_min": l.x_min, "x_max": l.x_max,
                       "density": l.density, "truck_fraction": l.truck_fraction}
                      for l in self.lanes],
            "max_paths": self.max_paths,
            "min_paths": self.min_paths,
            "reflection_coeff": self.reflection_coeff,
            "traffic_drift": self.traffic_drift,
            "noise_snr_db": self.noise_snr_db,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            bs_position=tuple(d["bs_position"]),
            array=ArrayGeometry(**d["array"]),
            carrier_freq=d["carrier_freq"],
            bandwidth=d["bandwidth"],
            n_subcarriers=d["n_subcarriers"],
            ue_grid=np.asarray(d["ue_grid"], float),
            grid_spacing=d["grid_spacing"],
            buildings=[Box(tuple(b["lo"]), tuple(b["hi"])) for b in d["buildings"]],
            lanes=[Lane(**l) for l in d["lanes"]],
            max_paths=d["max_paths"],
            min_paths=d.get("min_paths"),
            reflection_coeff=d.get("reflection_coeff", 0.6),
            traffic_drift=d.get("traffic_drift", 0.0),
            noise_snr_db=d.get("noise_snr_db"),
        )

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Scene:
    scene_id: int
    vehicles: list  # list[Box]


@dataclass
class MpcSet:
    """Multipath components of one BS-UE link."""

    gains: np.ndarray       # complex [P]
    azimuths: np.ndarray    # radians [P]
    elevations: np.ndarray  # radians [P]
    delays: np.ndarray      # seconds [P]

    def __len__(self):
        return self.gains.size


# ----------------------------------------------------------------------
# steering vector and CFR synthesis
# ----------------------------------------------------------------------

def steering_vector(azimuth, elevation, array):
    """Half-wavelength UPA steering vector, flattened iy-major, iz-minor.

    Element (iy, iz), zero-based, has phase
    pi * (iy * sin(elevation) * sin(azimuth) + iz * cos(elevation)),
    so boresight (elevation pi/2, azimuth 0) gives the all-ones vector.
    """
    iy = np.arange(array.m_y)[:, None]
    iz = np.arange(array.m_z)[None, :]
    phase = np.pi * 2.0 * array.spacing * (
        iy * np.sin(elevation) * np.sin(azimuth) + iz * np.cos(elevation))
    return np.exp(1j * phase).reshape(-1)


def synth_cfr(mpcs, scenario, array=None):
    """Channel matrix H [M, K]: column k = sum_p gain_p a_p exp(-2j pi f_k tau_p)."""
    if len(mpcs) == 0:
        raise EmptyLink("cannot synthesize CFR from an empty path set")
    array = array if array is not None else scenario.array
    a_mat = np.stack([steering_vector(az, el, array)
                      for az, el in zip(mpcs.azimuths, mpcs.elevations)], axis=1)
    freqs = scenario.subcarrier_freqs()
    phases = np.exp(-2j * np.pi * np.outer(mpcs.delays, freqs))  # [P, K]
    return (a_mat * mpcs.gains[None, :]) @ phases


# ----------------------------------------------------------------------
# segment / box intersection (slab method, vectorized)
# ----------------------------------------------------------------------

def segments_hit_boxes(p0, p1, boxes_lo, boxes_hi):
    """Boolean [S, B]: does the open segment interior enter each box?

    p0, p1: [S, 3] endpoints.  Endpoint touches and face grazes are not
    counted as hits (open parameter interval with a small margin).
    """
    p0 = np.atleast_2d(np.asarray(p0, float))
    p1 = np.atleast_2d(np.asarray(p1, float))
    if boxes_lo.size == 0:
        return np.zeros((p0.shape[0], 0), bool)
    d = (p1 - p0)[:, None, :]                      # [S, 1, 3]
    o = p0[:, None, :]
    lo = boxes_lo[None, :, :]                      # [1, B, 3]
    hi = boxes_hi[None, :, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - o) / d
        t1 = (hi - o) / d
    tnear = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tfar = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # axes with zero direction: inside the slab iff o within [lo, hi]
    zero = np.broadcast_to(d == 0.0, tnear.shape)
    inside = (o >= lo) & (o <= hi)
    tnear = np.where(zero, np.where(inside, -np.inf, np.inf), tnear)
    tfar = np.where(zero, np.where(inside, np.inf, -np.inf), tfar)
    tmin = tnear.max(axis=2)
    tmax = tfar.min(axis=2)
    enter = np.maximum(tmin, _SEG_EPS)
    leave = np.minimum(tmax, 1.0 - _SEG_EPS)
    return leave - enter > 1e-12


def _boxes_to_arrays(boxes):
    if not boxes:
        return np.zeros((0, 3)), np.zeros((0, 3))
    lo = np.array([b.lo for b in boxes], float)
    hi = np.array([b.hi for b in boxes], float)
    return lo, hi


def _departure_angles(direction):
    d = direction / np.linalg.norm(direction)
    elevation = np.arccos(np.clip(d[2], -1.0, 1.0))
    azimuth = np.arctan2(d[1], d[0])
    return azimuth, elevation


# ----------------------------------------------------------------------
# first-order ray tracing
# ----------------------------------------------------------------------

def trace_paths(scenario, scene, ue, n_keep=None):
    """Direct path + single-bounce reflections for one BS-UE link.

    Returns (MpcSet, label).  Raises EmptyLink when nothing survives.
    `n_keep` truncates to the strongest n paths (default scenario.max_paths).
    """
    bs = np.asarray(scenario.bs_position, float)
    ue = np.asarray(ue, float)
    lam = scenario.wavelength
    rho = scenario.reflection_coeff

    bld_lo, bld_hi = _boxes_to_arrays(scenario.buildings)
    veh_lo, veh_hi = _boxes_to_arrays(scene.vehicles)
    all_lo = np.concatenate([bld_lo, veh_lo])
    all_hi = np.concatenate([bld_hi, veh_hi])

    # direct path and semantic label
    hit_bld = segments_hit_boxes(bs, ue, bld_lo, bld_hi)[0]
    hit_veh = segments_hit_boxes(bs, ue, veh_lo, veh_hi)[0]
    if hit_bld.any():
        label = SNLOS
    elif hit_veh.any():
        label = DNLOS
    else:
        label = LOS

    lengths, dirs = [], []
    if label == LOS:
        lengths.append(np.linalg.norm(ue - bs))
        dirs.append(ue - bs)
    n_direct = len(lengths)

    # image-method reflections off every face of every box
    refl_segs = _reflection_candidates(bs, ue, all_lo, all_hi)
    if refl_segs:
        q_pts = np.array([q for q, _ in refl_segs])
        seg1 = segments_hit_boxes(np.broadcast_to(bs, q_pts.shape), q_pts,
                                  all_lo, all_hi).any(axis=1)
        seg2 = segments_hit_boxes(q_pts, np.broadcast_to(ue, q_pts.shape),
                                  all_lo, all_hi).any(axis=1)
        for (q, _), b1, b2 in zip(refl_segs, seg1, seg2):
            if b1 or b2:
                continue
            lengths.append(np.linalg.norm(q - bs) + np.linalg.norm(ue - q))
            dirs.append(q - bs)

    if not lengths:
        raise EmptyLink(f"no surviving path to UE at {ue.tolist()}")

    lengths = np.asarray(lengths)
    gains = lam / (4.0 * np.pi * lengths) * np.exp(-2j * np.pi * lengths / lam)
    gains[n_direct:] *= rho
    angles = np.array([_departure_angles(d) for d in dirs])
    delays = lengths / SPEED_OF_LIGHT

    # keep the strongest paths (stable order for determinism)
    n_keep = n_keep if n_keep is not None else scenario.max_paths
    order = np.argsort(-np.abs(gains), kind="stable")[:n_keep]
    order = np.sort(order)  # preserve emission order among the survivors
    return MpcSet(gains[order], angles[order, 0], angles[order, 1],
                  delays[order]), label


def _reflection_candidates(bs, ue, boxes_lo, boxes_hi):
    """(reflection point, box index) for every geometrically valid face."""
    out = []
    for bi in range(boxes_lo.shape[0]):
        lo, hi = boxes_lo[bi], boxes_hi[bi]
        for axis in range(3):
            for plane, sign in ((lo[axis], -1.0), (hi[axis], 1.0)):
                # both endpoints strictly on the outer side of the face
                if sign * (bs[axis] - plane) <= 1e-9:
                    continue
                if sign * (ue[axis] - plane) <= 1e-9:
                    continue
                img = bs.copy()
                img[axis] = 2.0 * plane - bs[axis]
                d = ue - img
                if abs(d[axis]) < 1e-12:
                    continue
                t = (plane - img[axis]) / d[axis]
                if not 0.0 < t < 1.0:
                    continue
                q = img + t * d
                ok = True
                for ax2 in range(3):
                    if ax2 == axis:
                        continue
                    if not (lo[ax2] - 1e-9 <= q[ax2] <= hi[ax2] + 1e-9):
                        ok = False
                        break
                if ok:
                    out.append((q, bi))
    return out


# ----------------------------------------------------------------------
# scene and dataset generation
# ----------------------------------------------------------------------

def make_scene(scenario, seed, scene_id, n_scenes):
    """Vehicle placement for one scene, a pure function of (scenario, seed, id).

    Traffic density ramps up along the scene axis by `traffic_drift`,
    so early and late scenes see systematically different blockage.
    """
    rng = np.random.default_rng([int(seed), int(scene_id)])
    frac = scene_id / max(n_scenes - 1, 1)
    vehicles = []
    for lane in scenario.lanes:
        density = lane.density * (1.0 + scenario.traffic_drift * frac)
        n = rng.poisson(density * (lane.x_max - lane.x_min))
        for _ in range(n):
            kind = "truck" if rng.random() < lane.truck_fraction else "sedan"
            length, width, height = _VEHICLE_SIZES[kind]
            cx = rng.uniform(lane.x_min + length / 2, lane.x_max - length / 2)
            cy = lane.y_center + rng.uniform(-0.2, 0.2)
            vehicles.append(Box(
                (cx - length / 2, cy - width / 2, 0.0),
                (cx + length / 2, cy + width / 2, height)))
    return Scene(scene_id=scene_id, vehicles=vehicles)


@dataclass
class Dataset:
    cfr: np.ndarray        # complex128 [n, M, K]
    coords: np.ndarray     # float64 [n, 3]
    labels: np.ndarray     # uint8 [n]
    scene_ids: np.ndarray  # int64 [n]
    grid_ids: np.ndarray   # int64 [n]
    manifest: dict


def generate_dataset(scenario, n_scenes, seed):
    """All links of all scenes, emitted in (scene_id, grid index) order.

    Links with zero surviving paths are dropped and recorded in the
    manifest.  Output is a pure function of (scenario, n_scenes, seed).
    """
    if n_scenes < 1:
        raise ValueError("need at least one scene")
    cfrs, coords, labels, scene_ids, grid_ids, dropped = [], [], [], [], [], []
    for t in range(n_scenes):
        scene = make_scene(scenario, seed, t, n_scenes)
        for l, ue in enumerate(scenario.ue_grid):
            n_keep = scenario.max_paths
            if scenario.min_paths is not None:
                link_rng = np.random.default_rng([int(seed), t, l])
                n_keep = int(link_rng.integers(scenario.min_paths,
                                               scenario.max_paths + 1))
            try:
                mpcs, label = trace_paths(scenario, scene, ue, n_keep=n_keep)
            except EmptyLink:
                dropped.append([t, l])
                continue
            h = synth_cfr(mpcs, scenario)
            if scenario.noise_snr_db is not None:
                noise_rng = np.random.default_rng([int(seed), t, l, 7])
                h = _add_noise(h, scenario.noise_snr_db, noise_rng)
            cfrs.append(h)
            coords.append(ue)
            labels.append(label)
            scene_ids.append(t)
            grid_ids.append(l)

    cfr = np.stack(cfrs) if cfrs else np.zeros((0, scenario.array.size,
                                                scenario.n_subcarriers), complex)
    manifest = {
        "scenario": scenario.to_dict(),
        "n_scenes": int(n_scenes),
        "seed": int(seed),
        "n_samples": len(coords),
        "dropped": dropped,
        "scene_of_sample": [int(s) for s in scene_ids],
        "grid_of_sample": [int(g) for g in grid_ids],
        "cfr_shape": [len(coords), scenario.array.size, scenario.n_subcarriers],
        "cfr_dtype": "complex64 (interleaved re/im float32)",
        "byte_order": "little-endian",
        "layout": "[sample][antenna][subcarrier]; antennas iy-major, iz-minor",
    }
    return Dataset(cfr=cfr,
                   coords=np.asarray(coords, float).reshape(-1, 3),
                   labels=np.asarray(labels, np.uint8),
                   scene_ids=np.asarray(scene_ids, np.int64),
                   grid_ids=np.asarray(grid_ids, np.int64),
                   manifest=manifest)


def _add_noise(h, snr_db, rng):
    sig_power = np.mean(np.abs(h) ** 2)
    noise_power = sig_power * 10.0 ** (-snr_db / 10.0)
    scale = np.sqrt(noise_power / 2.0)
    return h + scale * (rng.standard_normal(h.shape)
                        + 1j * rng.standard_normal(h.shape))


# ----------------------------------------------------------------------
# ready-made street-canyon layouts
# ----------------------------------------------------------------------

def rectangular_grid(x_min, x_max, n_x, y_values, z=1.5):
    """UE grid: n_x points per row at each y in y_values, row-major."""
    xs = np.linspace(x_min, x_max, n_x)
    pts = [(x, y, z) for y in y_values for x in xs]
    return np.asarray(pts, float)


def desk_scenario(array=None, n_subcarriers=32, grid_points=200,
                  traffic_drift=3.0, min_paths=None, max_paths=12):
    """Small street canyon sized to train on a single CPU core in minutes.

    200 sidewalk grid points, two building rows forming the canyon, a
    mid-street kiosk casting static shadows, four traffic lanes whose
    density drifts upward across scenes (a real source-to-target shift).
    """
    array = array or ArrayGeometry(4, 4)
    n_x = grid_points // 2
    grid = rectangular_grid(-19.8, 19.8, n_x, y_values=(5.5, 6.5), z=1.5)
    spacing = (19.8 * 2) / (n_x - 1)
    buildings = [
        Box((-25.0, -20.0, 0.0), (25.0, -8.0, 18.0)),   # near-side row
        Box((-25.0, 8.0, 0.0), (25.0, 20.0, 18.0)),     # far-side row
        Box((2.0, -1.0, 0.0), (8.0, 2.5, 6.0)),          # mid-street kiosk
        Box((-25.0, -20.0, -0.5), (25.0, 20.0, 0.0)),    # ground slab
    ]
    lanes = [Lane(y_center=yc, x_min=-22.0, x_max=22.0, density=0.05,
                  truck_fraction=0.45) for yc in (-3.0, -1.0, 1.0, 3.0)]
    return Scenario(
        bs_position=(-15.0, -7.5, 6.0),
        array=array,
        carrier_freq=3.5e9,
        bandwidth=100e6,
        n_subcarriers=n_subcarriers,
        ue_grid=grid,
        grid_spacing=spacing,
        buildings=buildings,
        lanes=lanes,
        max_paths=max_paths,
        min_paths=min_paths,
        traffic_drift=traffic_drift,
    )


def full_scale_scenario():
    """Full-size configuration: 8x8 array, 64 subcarriers, 0.8 m grid."""
    array = ArrayGeometry(8, 8)
    grid = rectangular_grid(-40.0, 40.0, 101, y_values=(5.4, 6.2), z=1.5)
    sc = desk_scenario(array=array, n_subcarriers=64, max_paths=25)
    return Scenario(
        bs_position=sc.bs_position, array=array, carrier_freq=3.5e9,
        bandwidth=100e6, n_subcarriers=64, ue_grid=grid, grid_spacing=0.8,
        buildings=[Box((-45, -20, 0), (45, -8, 18)),
                   Box((-45, 8, 0), (45, 20, 18)),
                   Box((2.0, -1.0, 0.0), (8.0, 2.5, 6.0)),
                   Box((-45, -20, -0.5), (45, 20, 0.0))],
        lanes=[Lane(y_center=yc, x_min=-42.0, x_max=42.0, density=0.05,
                    truck_fraction=0.45) for yc in (-3.0, -1.0, 1.0, 3.0)],
        max_paths=25, traffic_drift=1.5)
