"""
Synthetic pushing world.

Objects are 3x3-cell footprints in the unit square, pushed by a disc-shaped pusher. Each
object has a hidden mass and friction, only visible through its dynamics. Frames are
16x16 grayscale rasters of the scene.
"""

import logging
import math
import os
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np
import rasterio.features
import xarray as xr
from affine import Affine
from construct import (
    Bytes,
    Const,
    ConstructError,
    Float32l,
    Int16ul,
    Int32ul,
    Struct,
)
from PIL import Image
from shapely import affinity
from shapely.geometry import Point, box
from shapely.ops import nearest_points, unary_union

from .utils import atomic_write, parallel_map, timing

logger = logging.getLogger("evf.pushworld")
logger.addHandler(logging.NullHandler())

FRAME_SHAPE = (16, 16)
# world units per footprint cell
CELL = 0.075
PUSHER_RADIUS = 1 / 16
A_MAX = 0.08
OBJECT_INTENSITY = 0.8
PUSHER_INTENSITY = 0.4
CENTER_BOUNDS = (0.15, 0.85)
PUSHER_BOUNDS = (1.5 / 16, 1 - 1.5 / 16)
KAPPA = 1.0
MAX_ROTATION = 0.35
# scripted pushes: per-step pusher displacement
PUSH_SPEED = 0.035

_SHAPES = (
    "### ### ###",
    "### ### ...",
    "#.. #.. ###",
    ".#. ### .#.",
    "### .#. .#.",
    "##. .## ...",
    "### #.. ...",
    "#.. ##. .##",
    "### ... ...",
    "##. ##. ...",
    "### #.# ...",
    "### #.# ###",
)
MASSES = np.linspace(0.5, 2.0, 5)
FRICTIONS = np.linspace(0.2, 1.0, 5)
CATALOG_CAPACITY = len(_SHAPES) * len(MASSES) * len(FRICTIONS)

SPLITS = ("train", "test")


class CatalogError(ValueError):
    pass


class DatasetFormatError(ValueError):
    """Malformed dataset file. `offset` is the byte offset where parsing failed."""

    def __init__(self, message, offset):
        super().__init__("%s (at byte offset %d)" % (message, offset))
        self.offset = offset


class ManifestError(ValueError):
    pass


def _f32(x):
    # spec values are stored as f32 in dataset files
    return float(np.float32(x))


def shape_mask(shape_id):
    """3x3 boolean occupancy of a catalog shape (rows along y)"""
    rows = _SHAPES[shape_id].split()
    return np.array([[c == "#" for c in row] for row in rows])


@lru_cache(maxsize=None)
def _shape_geometry(shape_id):
    mask = shape_mask(shape_id)
    rows, cols = np.nonzero(mask)
    # bounding-box center, in cell units
    cx = (cols.min() + cols.max() + 1) / 2
    cy = (rows.min() + rows.max() + 1) / 2
    cells = [
        box((c - cx) * CELL, (r - cy) * CELL, (c + 1 - cx) * CELL, (r + 1 - cy) * CELL)
        for r, c in zip(rows, cols)
    ]
    centers = np.stack([cols + 0.5 - cx, rows + 0.5 - cy], axis=1)
    com = centers.mean(axis=0)
    # point-mass cells plus the inertia of a square cell about its center
    gyration2 = float(np.mean(np.sum((centers - com) ** 2, axis=1)) * CELL**2 + CELL**2 / 6)
    return unary_union(cells), (float(com[0]), float(com[1])), gyration2


@dataclass(frozen=True)
class ObjectSpec:
    """
    Hidden and visible properties of one object.

    `com_offset` is the center of mass relative to the footprint bounding-box center, in
    cell units.
    """

    shape_id: int
    mass: float
    friction: float
    com_offset: tuple

    @classmethod
    def from_shape(cls, shape_id, mass, friction):
        if not 0 <= shape_id < len(_SHAPES):
            raise CatalogError("unknown shape_id %d" % shape_id)
        com = _shape_geometry(shape_id)[1]
        return cls(int(shape_id), _f32(mass), _f32(friction), (_f32(com[0]), _f32(com[1])))

    @property
    def mask(self):
        return shape_mask(self.shape_id)

    @property
    def footprint(self):
        """footprint polygon in the object frame, bounding box centered on 0"""
        return _shape_geometry(self.shape_id)[0]

    @property
    def gyration2(self):
        """squared radius of gyration about the center of mass, world units"""
        return _shape_geometry(self.shape_id)[2]

    def key(self):
        return (self.shape_id, self.mass, self.friction, self.com_offset)


class WorldState(NamedTuple):
    x: float
    y: float
    theta: float
    px: float
    py: float

    @property
    def center(self):
        return np.array([self.x, self.y])

    @property
    def pusher(self):
        return np.array([self.px, self.py])


class Frame(NamedTuple):
    intensity: np.ndarray
    pusher_mask: np.ndarray


class Trajectory(NamedTuple):
    frames: np.ndarray
    actions: np.ndarray
    pusher_mask: np.ndarray
    object_id: int


def sample_object_catalog(seed, K):
    """
    Draw `K` distinct objects from the shape x mass x friction grid.

    Parameters
    ----------
    seed: int
    K: int
        must not exceed `CATALOG_CAPACITY`.

    Returns
    -------
    list of ObjectSpec
        deterministic under `seed`.

    See Also
    --------
    split_catalog
    """
    if K < 0 or K > CATALOG_CAPACITY:
        raise CatalogError(
            "cannot draw %d objects from a catalog of capacity %d" % (K, CATALOG_CAPACITY))
    rng = np.random.default_rng(seed)
    specs = []
    for index in rng.permutation(CATALOG_CAPACITY)[:K]:
        shape_id, rest = divmod(int(index), len(MASSES) * len(FRICTIONS))
        mass_i, friction_i = divmod(rest, len(FRICTIONS))
        specs.append(ObjectSpec.from_shape(shape_id, MASSES[mass_i], FRICTIONS[friction_i]))
    return specs


def split_catalog(seed, k_train, k_test):
    """disjoint train/test object lists from a single catalog draw"""
    specs = sample_object_catalog(seed, k_train + k_test)
    return specs[:k_train], specs[k_train:]


def footprint(state, spec):
    """object polygon in world coordinates"""
    poly = affinity.rotate(spec.footprint, state.theta, origin=(0, 0), use_radians=True)
    return affinity.translate(poly, state.x, state.y)


def _rotate(v, angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def center_of_mass(state, spec):
    return state.center + _rotate(np.asarray(spec.com_offset) * CELL, state.theta)


def wrap_angle(theta):
    """wrap to (-pi, pi]"""
    wrapped = math.remainder(theta, 2 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


def clip_action(action, a_max=A_MAX):
    return np.clip(np.asarray(action, dtype=float), -a_max, a_max)


def move_pusher(pusher, action):
    """pusher position after `action`, kept inside `PUSHER_BOUNDS`"""
    return np.clip(np.asarray(pusher, dtype=float) + clip_action(action), *PUSHER_BOUNDS)


def pusher_path(pusher, actions):
    """
    Pusher positions after each of `actions`.

    Parameters
    ----------
    pusher: array-like, shape (2,)
    actions: array-like, shape (..., n, 2)
        action sequences, any leading batch shape.

    Returns
    -------
    numpy.ndarray
        shape (..., n, 2)
    """
    actions = clip_action(actions)
    positions = np.empty_like(actions)
    current = np.broadcast_to(np.asarray(pusher, dtype=float), actions[..., 0, :].shape)
    for i in range(actions.shape[-2]):
        current = np.clip(current + actions[..., i, :], *PUSHER_BOUNDS)
        positions[..., i, :] = current
    return positions


def _separation(poly, point, direction):
    """shortest move of `poly` along `direction` clearing the pusher disc"""

    def clear(s):
        return affinity.translate(poly, *(s * direction)).distance(point) >= PUSHER_RADIUS

    lo = 0.0
    hi = 2 * (PUSHER_RADIUS + 3 * CELL)
    for _ in range(25):
        mid = (lo + hi) / 2
        if clear(mid):
            hi = mid
        else:
            lo = mid
    return hi


def step(state, spec, action):
    """
    Advance the world by one action.

    The pusher moves by the clipped action. If its disc then overlaps the object, the
    object is moved out of the disc along the pusher motion, scaled by
    1/sqrt(friction*mass), and rotated about its center of mass by
    `KAPPA * cross(r, d) / (mass * gyration2)` where `r` is the contact offset from the
    center of mass and `d` the displacement, not the unit push direction. The rotation
    per step is clipped to +/- `MAX_ROTATION`.

    Returns
    -------
    WorldState
    """
    action = clip_action(action)
    if not np.any(action):
        return state
    old = state.pusher
    pusher = move_pusher(old, action)
    moved = state._replace(px=float(pusher[0]), py=float(pusher[1]))

    poly = footprint(state, spec)
    point = Point(*pusher)
    if poly.distance(point) >= PUSHER_RADIUS:
        return moved

    motion = pusher - old
    if not np.any(motion):
        # pusher stuck on the border: push along the requested action
        motion = action
    direction = motion / np.linalg.norm(motion)
    separation = _separation(poly, point, direction)

    if poly.contains(point):
        contact = pusher
    else:
        contact = np.array(nearest_points(poly, point)[0].coords[0])
    displacement = separation * direction / math.sqrt(spec.friction * spec.mass)
    com = center_of_mass(state, spec)
    r = contact - com
    torque = r[0] * displacement[1] - r[1] * displacement[0]
    dtheta = KAPPA * torque / (spec.mass * spec.gyration2)
    dtheta = float(np.clip(dtheta, -MAX_ROTATION, MAX_ROTATION))

    center = com + _rotate(state.center - com, dtheta) + displacement
    center = np.clip(center, *CENTER_BOUNDS)
    return moved._replace(
        x=float(center[0]), y=float(center[1]), theta=wrap_angle(state.theta + dtheta))


def _quantize(intensity):
    # same values as a u8 round trip through a dataset file
    return np.round(np.asarray(intensity) * 255).astype(np.float32) / np.float32(255)


_PLUS = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))


def pusher_masks(positions, shape=FRAME_SHAPE):
    """
    Boolean rasters of the pusher stencil (a 5-pixel plus) at every position.

    Parameters
    ----------
    positions: array-like, shape (..., 2)
        pusher (x, y) inside `PUSHER_BOUNDS`, so the stencil is never clipped.

    Returns
    -------
    numpy.ndarray
        shape (..., H, W)
    """
    h, w = shape
    positions = np.asarray(positions, dtype=float)
    flat = positions.reshape(-1, 2)
    cols = np.minimum((flat[:, 0] * w).astype(int), w - 1)
    rows = np.minimum((flat[:, 1] * h).astype(int), h - 1)
    index = np.arange(len(flat))
    masks = np.zeros((len(flat), h, w), dtype=bool)
    for dr, dc in _PLUS:
        masks[index, rows + dr, cols + dc] = True
    return masks.reshape(positions.shape[:-1] + (h, w))


def pusher_mask(pusher, shape=FRAME_SHAPE):
    return pusher_masks(pusher, shape)


def object_mask(state, spec, shape=FRAME_SHAPE):
    """
    Rasterize the object footprint on the frame grid.

    Pixel (row, col) covers world [col/W, (col+1)/W] x [row/H, (row+1)/H]. A pixel belongs
    to the object when its center is inside the footprint; footprints covering fewer
    than 3 pixel centers are rasterized with every touched pixel instead.
    """
    h, w = shape
    transform = Affine.scale(1 / w, 1 / h)
    geom = footprint(state, spec)
    mask = rasterio.features.rasterize(
        [geom], out_shape=shape, all_touched=False, transform=transform, fill=0,
        default_value=1, dtype="uint8")
    if mask.sum() < 3:
        mask = rasterio.features.rasterize(
            [geom], out_shape=shape, all_touched=True, transform=transform, fill=0,
            default_value=1, dtype="uint8")
    return mask.astype(bool)


def render(state, spec, shape=FRAME_SHAPE):
    """
    Render the scene.

    Returns
    -------
    Frame
        object at `OBJECT_INTENSITY`, pusher drawn last at `PUSHER_INTENSITY`, no
        anti-aliasing.

    Notes
    -----
    The at-least-3-pixels guarantee holds for `object_mask`. Where the pusher stencil
    overlaps the object, those pixels show the pusher, so the visible object pixels are
    `object_mask & ~pusher_mask`.
    """
    intensity = np.zeros(shape, dtype=np.float32)
    intensity[object_mask(state, spec, shape)] = OBJECT_INTENSITY
    mask = pusher_mask(state.pusher, shape)
    intensity[mask] = PUSHER_INTENSITY
    return Frame(_quantize(intensity).astype(np.float32), mask)


def scripted_push(rng, T):
    """
    Initial state and constant action of one straight push.

    The object is placed near the center with a random angle; the pusher starts on a ray
    of uniformly drawn direction, laterally offset, outside the object.

    Returns
    -------
    tuple(WorldState, numpy.ndarray)
        initial state and the (T-1, 2) actions.
    """
    center = rng.uniform(0.4, 0.6, size=2)
    theta = rng.uniform(-math.pi, math.pi)
    phi = rng.uniform(-math.pi, math.pi)
    lateral = rng.uniform(-0.08, 0.08)
    distance = 0.26 + rng.uniform(0, 0.04)
    u = np.array([math.cos(phi), math.sin(phi)])
    n = np.array([-u[1], u[0]])
    pusher = np.clip(center - distance * u + lateral * n, *PUSHER_BOUNDS)
    state = WorldState(float(center[0]), float(center[1]), wrap_angle(theta),
                       float(pusher[0]), float(pusher[1]))
    actions = np.tile(u * PUSH_SPEED, (T - 1, 1))
    return state, actions


def simulate(state, spec, actions):
    """states visited from `state` under `actions` (initial state included)"""
    states = [state]
    for action in actions:
        states.append(step(states[-1], spec, action))
    return states


def render_states(states, spec, shape=FRAME_SHAPE):
    frames = [render(s, spec, shape) for s in states]
    return (np.stack([f.intensity for f in frames]), np.stack([f.pusher_mask for f in frames]))


def _seed_words(seed):
    return [int(s) for s in np.atleast_1d(seed)]


@timing
def generate_dataset(spec, N, T, seed, object_id=0, shape=FRAME_SHAPE):
    """
    Simulate `N` straight pushes of one object.

    Trajectory `i` draws from `numpy.random.default_rng([*seed, i])`, which does not
    depend on `spec`: objects differing only in mass or friction share their first
    frames and push scripts.

    Returns
    -------
    DatasetFile
    """
    if N < 1 or T < 2:
        raise ValueError("need N >= 1 and T >= 2, got N=%d T=%d" % (N, T))
    frames = np.empty((N, T) + tuple(shape), dtype=np.float32)
    masks = np.empty((N, T) + tuple(shape), dtype=bool)
    actions = np.empty((N, T - 1, 2), dtype=np.float32)
    for i in range(N):
        rng = np.random.default_rng(_seed_words(seed) + [i])
        state, script = scripted_push(rng, T)
        frames[i], masks[i] = render_states(simulate(state, spec, script), spec, shape)
        actions[i] = script
    return DatasetFile(object_id, spec, frames, masks, actions)


class DatasetFile:
    """
    All trajectories of one object.

    Data is held in `DatasetFile.dataset`, an `xarray.Dataset` with variables `frames`
    and `pusher_mask` over (trajectory, time, y, x) and `actions` over
    (trajectory, step, axis). The object spec is stored in its attrs.
    """

    def __init__(self, object_id, spec, frames, pusher_mask, actions):
        frames = np.asarray(frames, dtype=np.float32)
        pusher_mask = np.asarray(pusher_mask, dtype=bool)
        actions = np.asarray(actions, dtype=np.float32)
        if frames.ndim != 4 or pusher_mask.shape != frames.shape:
            raise ValueError("frames and pusher_mask must share a (N, T, H, W) shape")
        n, t = frames.shape[:2]
        if actions.shape != (n, t - 1, 2):
            raise ValueError("actions shape %s, expected %s" % (actions.shape, (n, t - 1, 2)))
        self.object_id = int(object_id)
        self.spec = spec
        self.dataset = xr.Dataset(
            {
                "frames": (("trajectory", "time", "y", "x"), frames),
                "pusher_mask": (("trajectory", "time", "y", "x"), pusher_mask),
                "actions": (("trajectory", "step", "axis"), actions),
            },
            coords={"axis": ["dx", "dy"]},
            attrs={
                "object_id": self.object_id,
                "shape_id": spec.shape_id,
                "mass": spec.mass,
                "friction": spec.friction,
                "com_x": spec.com_offset[0],
                "com_y": spec.com_offset[1],
            },
        )

    def __repr__(self):
        return "<DatasetFile object %d: %d trajectories, T=%d, %dx%d, %s>" % (
            (self.object_id, self.N, self.T) + self.frame_shape + (self.spec,))

    def __len__(self):
        return self.N

    @property
    def N(self):
        return self.dataset.sizes["trajectory"]

    @property
    def T(self):
        return self.dataset.sizes["time"]

    @property
    def frame_shape(self):
        return (self.dataset.sizes["y"], self.dataset.sizes["x"])

    @property
    def frames(self):
        return self.dataset["frames"].values

    @property
    def masks(self):
        return self.dataset["pusher_mask"].values

    @property
    def actions(self):
        return self.dataset["actions"].values

    def trajectory(self, i):
        return Trajectory(self.frames[i], self.actions[i], self.masks[i], self.object_id)

    def equals(self, other):
        return (
            self.object_id == other.object_id
            and self.spec == other.spec
            and self.dataset.equals(other.dataset)
        )


_HEADER = Struct(
    "magic" / Const(b"EVFD"),
    "version" / Const(1, Int16ul),
    "object_id" / Int32ul,
    "shape_id" / Int16ul,
    "mass" / Float32l,
    "friction" / Float32l,
    "com_x" / Float32l,
    "com_y" / Float32l,
    "n" / Int32ul,
    "t" / Int16ul,
    "h" / Int16ul,
    "w" / Int16ul,
)
HEADER_SIZE = _HEADER.sizeof()
# byte offset of the shape_id field
SHAPE_ID_OFFSET = Struct(*_HEADER.subcons[:3]).sizeof()


def _trajectory_struct(t, h, w):
    return Struct(
        "frames" / Bytes(t * h * w),
        "masks" / Bytes(t * h * w),
        "actions" / Bytes(4 * 2 * (t - 1)),
    )


def trajectory_size(t, h, w):
    return _trajectory_struct(t, h, w).sizeof()


def write_dataset(dataset_file, path):
    """
    Write `dataset_file` to `path` in the EVFD format (atomically).

    Frames are stored as u8 (intensity x 255, rounded).
    """
    spec = dataset_file.spec
    n, t = dataset_file.N, dataset_file.T
    h, w = dataset_file.frame_shape
    header = _HEADER.build(
        dict(
            object_id=dataset_file.object_id,
            shape_id=spec.shape_id,
            mass=spec.mass,
            friction=spec.friction,
            com_x=spec.com_offset[0],
            com_y=spec.com_offset[1],
            n=n,
            t=t,
            h=h,
            w=w,
        )
    )
    record = _trajectory_struct(t, h, w)
    frames = np.round(dataset_file.frames * 255).astype(np.uint8)
    masks = dataset_file.masks.astype(np.uint8)
    actions = dataset_file.actions.astype("<f4")
    with atomic_write(path, "wb") as f:
        f.write(header)
        for i in range(n):
            f.write(record.build(dict(
                frames=frames[i].tobytes(), masks=masks[i].tobytes(),
                actions=actions[i].tobytes())))


def read_dataset(path):
    """
    Read an EVFD dataset file.

    Returns
    -------
    DatasetFile

    Raises
    ------
    DatasetFormatError
        on bad magic or version, an unknown shape_id, truncation or trailing bytes.
    """
    with open(path, "rb") as f:
        data = f.read()
    try:
        header = _HEADER.parse(data)
    except ConstructError as e:
        offset = 0 if data[:4] != b"EVFD" else 4 if data[4:6] != b"\x01\x00" else 6
        raise DatasetFormatError("bad dataset header in %s: %s" % (path, e), offset) from None
    if header.shape_id >= len(_SHAPES):
        raise DatasetFormatError("unknown shape_id %d in %s, expected 0..%d" % (
            header.shape_id, path, len(_SHAPES) - 1), SHAPE_ID_OFFSET)
    n, t, h, w = header.n, header.t, header.h, header.w
    if t < 2 or h < 1 or w < 1:
        raise DatasetFormatError("invalid dimensions T=%d H=%d W=%d" % (t, h, w), HEADER_SIZE)
    record = _trajectory_struct(t, h, w)
    size = record.sizeof()
    frames = np.empty((n, t, h, w), dtype=np.float32)
    masks = np.empty((n, t, h, w), dtype=bool)
    actions = np.empty((n, t - 1, 2), dtype=np.float32)
    offset = HEADER_SIZE
    for i in range(n):
        try:
            rec = record.parse(data[offset: offset + size])
        except ConstructError:
            raise DatasetFormatError(
                "truncated trajectory %d of %d in %s" % (i, n, path), offset) from None
        frames[i] = np.frombuffer(rec.frames, np.uint8).reshape(t, h, w) / np.float32(255)
        masks[i] = np.frombuffer(rec.masks, np.uint8).reshape(t, h, w) != 0
        actions[i] = np.frombuffer(rec.actions, "<f4").reshape(t - 1, 2)
        offset += size
    if offset != len(data):
        raise DatasetFormatError("%d trailing bytes in %s" % (len(data) - offset, path), offset)
    spec = ObjectSpec(header.shape_id, _f32(header.mass), _f32(header.friction),
                      (_f32(header.com_x), _f32(header.com_y)))
    return DatasetFile(header.object_id, spec, frames, masks, actions)


def dataset_file_size(n, t, h, w):
    return HEADER_SIZE + n * trajectory_size(t, h, w)


def write_manifest(path, entries):
    """write `(dataset path, tag)` lines, paths relative to the manifest directory"""
    root = Path(path).parent
    lines = []
    for dataset_path, tag in entries:
        if tag not in SPLITS:
            raise ManifestError("unknown split tag %r" % tag)
        rel = os.path.relpath(dataset_path, root)
        if " " in rel:
            raise ManifestError("dataset path %r contains a space" % rel)
        lines.append("%s %s" % (rel, tag))
    with atomic_write(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path):
    """
    Read a manifest.

    Returns
    -------
    list of tuple(pathlib.Path, str)
        dataset paths (resolved against the manifest directory) and split tags.
    """
    path = Path(path)
    entries = []
    with path.open() as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in SPLITS:
                raise ManifestError("%s:%d: expected '<path> train|test', got %r" % (
                    path, lineno, line))
            entries.append((path.parent / parts[0], parts[1]))
    return entries


def load_split(manifest, split):
    """read the datasets tagged `split` in `manifest`, in parallel"""
    paths = [p for p, tag in read_manifest(manifest) if tag == split]
    if not paths:
        warnings.warn("no '%s' datasets in %s" % (split, manifest))
        logger.warning("no '%s' datasets in %s", split, manifest)
    return parallel_map(read_dataset, paths)


def _generate_one(job, N, out_dir):
    object_id, spec, T, seed = job
    dataset = generate_dataset(spec, N, T, seed=[seed, object_id], object_id=object_id)
    path = Path(out_dir) / ("object_%03d.evfd" % object_id)
    write_dataset(dataset, path)
    return path


@timing
def generate_corpus(out_dir, seed, K_train, K_test, N, T, T_eval=None, force=False):
    """
    Generate train and test datasets and their manifest.

    Objects `0..K_train-1` are tagged train and the following `K_test` test. Test
    datasets have `T_eval` frames (`T` if None).

    Returns
    -------
    pathlib.Path
        the manifest path.

    Raises
    ------
    FileExistsError
        if an output exists and `force` is False.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.txt"
    train, test = split_catalog(seed, K_train, K_test)
    T_eval = T if T_eval is None else T_eval
    jobs = [(i, spec, T, seed) for i, spec in enumerate(train)]
    jobs += [(K_train + i, spec, T_eval, seed) for i, spec in enumerate(test)]
    targets = [manifest] + [out_dir / ("object_%03d.evfd" % j[0]) for j in jobs]
    existing = [str(p) for p in targets if p.exists()]
    if existing and not force:
        raise FileExistsError("%s already exists (use --force)" % existing[0])
    paths = parallel_map(_generate_one, jobs, N=N, out_dir=out_dir)
    tags = ["train"] * len(train) + ["test"] * len(test)
    write_manifest(manifest, list(zip(paths, tags)))
    logger.info("wrote %d datasets and %s", len(paths), manifest)
    return manifest


def save_frame_png(path, intensity, scale=8):
    """save a [0, 1] frame as a grayscale PNG, upsampled by nearest neighbour"""
    pixels = np.round(np.clip(intensity, 0, 1) * 255).astype(np.uint8)
    image = Image.fromarray(pixels, mode="L")
    if scale > 1:
        image = image.resize((pixels.shape[1] * scale, pixels.shape[0] * scale), Image.NEAREST)
    image.save(path)
