"""Per-frame hand representation, simplified MANO kinematics and derived signals.

Frame layout (166 values)::

    [ left_present | left_mano(61) | left_contact(21) |
      right_present | right_mano(61) | right_contact(21) ]

with each MANO block ordered ``translation(3), pose(48), shape(10)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

MANO_DIM = 61
CONTACT_DIM = 21
HAND_DIM = 1 + MANO_DIM + CONTACT_DIM
FRAME_DIM = 2 * HAND_DIM
NUM_JOINTS = 21
MAX_FRAMES = 64
CONTACT_RANGE = 0.10

LEFT, RIGHT = 0, 1
HAND_OFFSETS = (0, HAND_DIM)


def flag_index(hand: int) -> int:
    return HAND_OFFSETS[hand]


def mano_slice(hand: int) -> slice:
    o = HAND_OFFSETS[hand] + 1
    return slice(o, o + MANO_DIM)


def contact_slice(hand: int) -> slice:
    o = HAND_OFFSETS[hand] + 1 + MANO_DIM
    return slice(o, o + CONTACT_DIM)


def scaled_dims() -> np.ndarray:
    """Boolean mask of frame dims that get z-scored (MANO values only)."""
    mask = np.zeros(FRAME_DIM, dtype=bool)
    for h in (LEFT, RIGHT):
        mask[mano_slice(h)] = True
    return mask


# ---------------------------------------------------------------- types

@dataclass
class ManoParams:
    translation: np.ndarray
    pose: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(48)
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(10)
        if not (np.isfinite(self.translation).all() and np.isfinite(self.pose).all()
                and np.isfinite(self.shape).all()):
            raise ValueError("MANO parameters must be finite")

    @classmethod
    def from_vector(cls, v) -> ManoParams:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (MANO_DIM,):
            raise ValueError(f"expected {MANO_DIM} MANO values, got shape {v.shape}")
        return cls(v[:3], v[3:51], v[51:])

    @classmethod
    def zeros(cls) -> ManoParams:
        return cls(np.zeros(3), np.zeros(48), np.zeros(10))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.pose, self.shape])


@dataclass
class ContactMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(CONTACT_DIM)
        self.values = np.clip(v, 0.0, 1.0)


@dataclass
class HandFrame:
    left_present: int = 0
    left_mano: ManoParams = field(default_factory=ManoParams.zeros)
    left_contact: ContactMap = field(default_factory=lambda: ContactMap(np.zeros(CONTACT_DIM)))
    right_present: int = 0
    right_mano: ManoParams = field(default_factory=ManoParams.zeros)
    right_contact: ContactMap = field(default_factory=lambda: ContactMap(np.zeros(CONTACT_DIM)))


def flatten(frame: HandFrame) -> np.ndarray:
    return np.concatenate([
        [float(frame.left_present)], frame.left_mano.to_vector(), frame.left_contact.values,
        [float(frame.right_present)], frame.right_mano.to_vector(), frame.right_contact.values,
    ])


def unflatten(vec) -> HandFrame:
    v = np.asarray(vec, dtype=np.float64)
    if v.shape != (FRAME_DIM,):
        raise ValueError(f"frame vector must have {FRAME_DIM} values, got shape {v.shape}")
    return HandFrame(
        int(round(v[flag_index(LEFT)])), ManoParams.from_vector(v[mano_slice(LEFT)]),
        ContactMap(v[contact_slice(LEFT)]),
        int(round(v[flag_index(RIGHT)])), ManoParams.from_vector(v[mano_slice(RIGHT)]),
        ContactMap(v[contact_slice(RIGHT)]),
    )


@dataclass
class MotionSequence:
    """A label plus ``length`` real frames, zero-padded to ``frames.shape[0]``."""

    frames: np.ndarray
    label: int
    length: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        n = self.frames.shape[0]
        if self.frames.ndim != 2 or self.frames.shape[1] != FRAME_DIM:
            raise ValueError(f"frames must be (N, {FRAME_DIM}), got {self.frames.shape}")
        if not 1 <= self.length <= n:
            raise ValueError(f"length {self.length} outside [1, {n}]")
        pad = self.frames[self.length:]
        if pad.size and (pad[:, flag_index(LEFT)].any() or pad[:, flag_index(RIGHT)].any()):
            raise ValueError("padding frames must have both presence flags 0")

    @property
    def real_frames(self) -> np.ndarray:
        return self.frames[:self.length]

    def hand_frames(self) -> list[HandFrame]:
        return [unflatten(f) for f in self.real_frames]


def pad_frames(frames: np.ndarray, n: int = MAX_FRAMES) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] > n:
        raise ValueError(f"{frames.shape[0]} frames exceed the maximum of {n}")
    out = np.zeros((n, FRAME_DIM))
    out[:frames.shape[0]] = frames
    return out


def decode_frames(x: np.ndarray, lengths=None) -> np.ndarray:
    """Snap generated frames to the representation's conventions: flags
    thresholded at 0.5, absent hands zeroed, contacts clamped to [0, 1], and
    frames past ``lengths`` zeroed."""
    x = np.array(x, dtype=np.float64, copy=True)
    for h in (LEFT, RIGHT):
        o = HAND_OFFSETS[h]
        present = x[..., o] >= 0.5
        x[..., o] = present
        x[..., contact_slice(h)] = np.clip(x[..., contact_slice(h)], 0.0, 1.0)
        x[..., o:o + HAND_DIM] *= present[..., None]
    if lengths is not None:
        keep = np.arange(x.shape[-2]) < np.asarray(lengths)[..., None]
        x *= keep[..., None]
    return x


# ---------------------------------------------------------------- kinematics

@dataclass(frozen=True)
class HandSkeleton:
    parent: np.ndarray
    template_offsets: np.ndarray
    shape_basis: np.ndarray
    joint_names: tuple = ()
    version: int = 1

    def __post_init__(self):
        parent = np.asarray(self.parent)
        if parent.shape != (NUM_JOINTS,) or parent[0] != -1:
            raise ValueError("parent array must have 21 entries with the wrist as root")
        if np.any(parent[1:] >= np.arange(1, NUM_JOINTS)) or np.any(parent[1:] < 0):
            raise ValueError("parents must precede their children")
        roots = np.flatnonzero(parent == 0)
        if len(roots) != 5:
            raise ValueError("expected five chains off the wrist")

    @classmethod
    def load(cls, path=None) -> HandSkeleton:
        if path is None:
            text = resources.files("tshamo.data").joinpath("hand_skeleton_v1.json").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        doc = json.loads(text)
        if doc.get("format") != "tshamo-hand-skeleton" or doc.get("version") != 1:
            raise ValueError("unsupported skeleton file (format/version)")
        return cls(np.array(doc["parent"]), np.array(doc["template_offsets"], dtype=np.float64),
                   np.array(doc["shape_basis"], dtype=np.float64), tuple(doc["joint_names"]),
                   doc["version"])

    def shaped_offsets(self, shape) -> np.ndarray:
        """Rest offsets (..., 21, 3) after applying shape coefficients (..., 10)."""
        return self.template_offsets + np.einsum("jkb,...b->...jk", self.shape_basis, np.asarray(shape))

    @property
    def rotating_joints(self) -> np.ndarray:
        """Skeleton joint index for each of the 16 pose triples."""
        idx = [0]
        for finger in range(5):
            idx += [1 + 4 * finger + i for i in range(3)]
        return np.array(idx)


_DEFAULT_SKELETON: HandSkeleton | None = None


def default_skeleton() -> HandSkeleton:
    global _DEFAULT_SKELETON
    if _DEFAULT_SKELETON is None:
        _DEFAULT_SKELETON = HandSkeleton.load()
    return _DEFAULT_SKELETON


def rodrigues(aa) -> np.ndarray:
    """Axis-angle vectors (..., 3) -> rotation matrices (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta2 = (aa * aa).sum(-1)
    theta = np.sqrt(theta2)
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    x, y, z = aa[..., 0], aa[..., 1], aa[..., 2]
    zero = np.zeros_like(x)
    K = np.stack([np.stack([zero, -z, y], -1),
                  np.stack([z, zero, -x], -1),
                  np.stack([-y, x, zero], -1)], -2)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def forward_kinematics(params, skel: HandSkeleton | None = None) -> np.ndarray:
    """Joint positions (..., 21, 3) from MANO vectors (..., 61) or a ManoParams."""
    skel = skel or default_skeleton()
    if isinstance(params, ManoParams):
        params = params.to_vector()
    params = np.asarray(params, dtype=np.float64)
    if params.shape[-1] != MANO_DIM:
        raise ValueError(f"expected trailing dim {MANO_DIM}, got {params.shape}")
    if not np.isfinite(params).all():
        raise ValueError("non-finite MANO parameters")
    trans = params[..., :3]
    rots = rodrigues(params[..., 3:51].reshape(params.shape[:-1] + (16, 3)))
    offsets = skel.shaped_offsets(params[..., 51:])

    local = [None] * NUM_JOINTS
    for k, j in enumerate(skel.rotating_joints):
        local[j] = rots[..., k, :, :]
    glob = [None] * NUM_JOINTS
    pos = [None] * NUM_JOINTS
    glob[0] = local[0]
    pos[0] = np.einsum("...ij,...j->...i", local[0], offsets[..., 0, :])
    for j in range(1, NUM_JOINTS):
        p = skel.parent[j]
        pos[j] = pos[p] + np.einsum("...ij,...j->...i", glob[p], offsets[..., j, :])
        glob[j] = glob[p] if local[j] is None else glob[p] @ local[j]
    return np.stack(pos, axis=-2) + trans[..., None, :]


# ---------------------------------------------------------------- contacts

def contact_values(joints, object_points, d_max: float = CONTACT_RANGE) -> np.ndarray:
    """Vectorized contact map: joints (..., 21, 3) against points (M, 3)."""
    pts = np.asarray(object_points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("object point cloud is empty; use the no-object path")
    j = np.asarray(joints, dtype=np.float64)
    d2 = ((j[..., :, None, :] - pts) ** 2).sum(-1)
    d = np.sqrt(d2.min(-1))
    return np.clip(1.0 - d / d_max, 0.0, 1.0)


def contact_map(joints, object_points, d_max: float = CONTACT_RANGE) -> ContactMap:
    return ContactMap(contact_values(joints, object_points, d_max))


def no_contact() -> ContactMap:
    return ContactMap(np.zeros(CONTACT_DIM))


# ---------------------------------------------------------------- camera

@dataclass(frozen=True)
class Camera:
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: tuple = (0.0, 0.0, 0.0)
    width: int = 640
    height: int = 480

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.fx, self.fy, self.cx, self.cy],
                               np.asarray(self.rotation, dtype=np.float64).reshape(9),
                               np.asarray(self.translation, dtype=np.float64),
                               [self.width, self.height]])

    @classmethod
    def from_vector(cls, v) -> Camera:
        v = np.asarray(v, dtype=np.float64)
        rot = tuple(tuple(float(x) for x in row) for row in v[4:13].reshape(3, 3))
        return cls(float(v[0]), float(v[1]), float(v[2]), float(v[3]), rot,
                   tuple(float(x) for x in v[13:16]), int(v[16]), int(v[17]))


CAMERA_VECTOR_DIM = 18


def project_2d(joints, camera: Camera) -> np.ndarray:
    j = np.asarray(joints, dtype=np.float64)
    cam = j @ np.asarray(camera.rotation).T + np.asarray(camera.translation)
    z = cam[..., 2]
    if np.any(z <= 0):
        raise ValueError("cannot project points at or behind the camera (z <= 0)")
    u = camera.fx * cam[..., 0] / z + camera.cx
    v = camera.fy * cam[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def rasterize_mask(joints2d, grid: int = 16, bounds=(640, 480)) -> np.ndarray:
    """Binary joint-occupancy grid, flattened row-major (row = v, col = u)."""
    w, h = float(bounds[0]), float(bounds[1])
    if w <= 0 or h <= 0:
        raise ValueError("image bounds must be positive")
    pts = np.asarray(joints2d, dtype=np.float64).reshape(-1, 2)
    out = np.zeros((grid, grid))
    inside = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
    pts = pts[inside]
    cols = np.minimum((pts[:, 0] / w * grid).astype(int), grid - 1)
    rows = np.minimum((pts[:, 1] / h * grid).astype(int), grid - 1)
    out[rows, cols] = 1.0
    return out.reshape(-1)


# ---------------------------------------------------------------- normalization

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    scaled: np.ndarray

    @property
    def active(self) -> np.ndarray:
        return self.scaled & (self.std > 0)


def compute_norm_stats(frames: np.ndarray, lengths) -> NormStats:
    """Per-dim mean/std over real frames of a (S, N, 166) training array."""
    frames = np.asarray(frames, dtype=np.float64)
    lengths = np.asarray(lengths)
    real = np.concatenate([frames[i, :lengths[i]] for i in range(len(lengths))], axis=0)
    return NormStats(real.mean(axis=0), real.std(axis=0), scaled_dims())


def normalize(x, stats: NormStats) -> np.ndarray:
    x = np.array(x, dtype=np.float64, copy=True)
    a = stats.active
    x[..., a] = (x[..., a] - stats.mean[a]) / stats.std[a]
    return x


def denormalize(x, stats: NormStats) -> np.ndarray:
    x = np.array(x, dtype=np.float64, copy=True)
    a = stats.active
    x[..., a] = x[..., a] * stats.std[a] + stats.mean[a]
    return x
