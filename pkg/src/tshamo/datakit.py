"""Synthetic hand-motion corpus, its on-disk format, and model checkpoints.

Dataset directory layout::

    manifest.json   structured metadata (splits, normalization stats, spec hash)
    records.bin     concatenated little-endian records

Each record is an 18-byte header ``<4s H I H H I`` (magic ``b"TSHM"``,
version, sequence id, label, length L, object point count M) followed by
``L*166`` frame values, ``M*3`` object coordinates and 18 camera values, all
float32.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import AdamState
from .denoisers import Denoiser, DenoiserConfig
from .motion import (CAMERA_VECTOR_DIM, FRAME_DIM, LEFT, MAX_FRAMES, RIGHT, Camera,
                     NormStats, compute_norm_stats, contact_slice, contact_values,
                     default_skeleton, flag_index, forward_kinematics, mano_slice,
                     pad_frames, scaled_dims)

MAGIC = b"TSHM"
RECORD_VERSION = 1
SCHEMA_VERSION = 1
HEADER = struct.Struct("<4sHIHHI")
MANIFEST_NAME = "manifest.json"
RECORDS_NAME = "records.bin"


class DatasetFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- motion families

# Each family is a smooth parametric motion of one hand's wrist rotation and
# finger flexion.  Frequencies in Hz, lengths in m, angles in rad.  Finger
# arrays run thumb..pinky: base flexion, oscillation amplitude and phase lag.
# Global translation and whether a mirrored second hand joins are drawn per
# sequence and carry no class information.
FAMILIES = [
    dict(name="grasp", rot0=(0.2, 0.0, 0.0), rot=(0.15, 0.0, 0.0), rot_hz=0.6,
         flex0=(0.5, 0.7, 0.7, 0.7, 0.7), flex1=(0.3, 0.5, 0.5, 0.5, 0.5), lag=(0.0,) * 5,
         flex_hz=0.6, obj=(0.0, 0.09, -0.04)),
    dict(name="pinch", rot0=(0.0, 0.2, 0.0), rot=(0.0, 0.1, 0.0), rot_hz=0.9,
         flex0=(0.55, 0.6, 0.15, 0.15, 0.15), flex1=(0.3, 0.4, 0.05, 0.05, 0.05), lag=(0.0,) * 5,
         flex_hz=0.9, obj=(0.035, 0.11, -0.03)),
    dict(name="point", rot0=(0.0, 0.0, 0.1), rot=(0.0, 0.35, 0.0), rot_hz=0.5,
         flex0=(0.9, 0.05, 1.2, 1.2, 1.2), flex1=(0.0, 0.1, 0.0, 0.0, 0.0), lag=(0.0,) * 5,
         flex_hz=0.5, obj=None),
    dict(name="wave", rot0=(0.0, 0.0, 0.0), rot=(0.0, 0.0, 0.5), rot_hz=1.2,
         flex0=(0.1,) * 5, flex1=(0.05,) * 5, lag=(0.0,) * 5,
         flex_hz=1.2, obj=None),
    dict(name="tap", rot0=(0.3, 0.0, 0.0), rot=(0.05, 0.0, 0.0), rot_hz=1.5,
         flex0=(0.2, 0.35, 0.35, 0.35, 0.35), flex1=(0.0, 0.35, 0.35, 0.35, 0.35),
         lag=(0.0, 0.0, 1.2, 2.4, 3.6), flex_hz=1.5, obj=(0.0, 0.13, -0.07)),
    dict(name="twist", rot0=(0.0, 0.0, 0.0), rot=(0.0, 0.8, 0.0), rot_hz=0.8,
         flex0=(0.6,) * 5, flex1=(0.05,) * 5, lag=(0.0,) * 5,
         flex_hz=0.8, obj=(0.0, 0.08, -0.05)),
]

HAND_CENTERS = {LEFT: np.array([-0.12, 0.0, 0.6]), RIGHT: np.array([0.12, 0.0, 0.6])}
_BEND_AXES = np.array([[0.45, -0.35, 0.82]] + [[-1.0, 0.0, 0.0]] * 4)
_BEND_AXES /= np.linalg.norm(_BEND_AXES, axis=1, keepdims=True)
_JOINT_RATIO = np.array([1.0, 1.1, 0.8])
OBJECT_POINTS = 24
OBJECT_RADIUS = 0.025


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 6
    seqs_per_class: int = 100
    min_len: int = 20
    max_len: int = 48
    noise: float = 1.0
    max_frames: int = MAX_FRAMES
    fps: float = 20.0
    split: tuple = (0.8, 0.1, 0.1)

    def validate(self) -> None:
        if not 2 <= self.num_classes <= len(FAMILIES):
            raise ValueError(f"num_classes must lie in [2, {len(FAMILIES)}], got {self.num_classes}")
        if self.seqs_per_class < 3:
            raise ValueError("need at least 3 sequences per class to fill three splits")
        if not 1 <= self.min_len <= self.max_len <= self.max_frames:
            raise ValueError("require 1 <= min_len <= max_len <= max_frames")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) <= 0:
            raise ValueError("split must be three positive fractions summing to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        d = dict(d)
        if "split" in d:
            d["split"] = tuple(d["split"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class SequenceRecord:
    seq_id: int
    label: int
    frames: np.ndarray          # (L, 166)
    objects: np.ndarray         # (M, 3), possibly empty
    camera: Camera = field(default_factory=Camera)

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class DatasetManifest:
    schema_version: int
    num_classes: int
    label_names: list
    max_frames: int
    frame_width: int
    splits: dict
    norm_mean: list
    norm_std: list
    generator_seed: int
    spec_hash: str
    spec: dict

    @property
    def norm_stats(self) -> NormStats:
        return NormStats(np.array(self.norm_mean), np.array(self.norm_std), scaled_dims())


@dataclass
class SplitArrays:
    frames: np.ndarray      # (S, N, 166) raw, zero-padded
    lengths: np.ndarray
    labels: np.ndarray
    cameras: list
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    manifest: DatasetManifest
    records: list

    def record(self, seq_id: int) -> SequenceRecord:
        return self._by_id()[seq_id]

    def _by_id(self) -> dict:
        return {r.seq_id: r for r in self.records}

    def split(self, name: str) -> list[SequenceRecord]:
        by_id = self._by_id()
        return [by_id[i] for i in self.manifest.splits[name]]

    def arrays(self, name: str) -> SplitArrays:
        recs = self.split(name)
        n = self.manifest.max_frames
        return SplitArrays(np.stack([pad_frames(r.frames, n) for r in recs]) if recs else np.zeros((0, n, FRAME_DIM)),
                           np.array([r.length for r in recs], dtype=np.int64),
                           np.array([r.label for r in recs], dtype=np.int64),
                           [r.camera for r in recs], np.array([r.seq_id for r in recs], dtype=np.int64))

    @property
    def norm_stats(self) -> NormStats:
        return self.manifest.norm_stats


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _sphere_points(n: int) -> np.ndarray:
    # Fibonacci sphere, deterministic
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5 ** 0.5) * k
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)


def synth_sequence(fam: dict, length: int, noise: float, rng: np.random.Generator, fps: float = 20.0):
    """One sequence of a family: raw (L, 166) frames and object points (M, 3).

    Every random draw is scaled by ``noise``, so ``noise=0`` gives one fixed
    motion per family.
    """
    tau = np.arange(length) / fps
    u = rng.random(6)
    phase = noise * 2 * np.pi * u[0]
    amp = max(0.2, 1.0 + 0.3 * noise * rng.standard_normal())
    speed = max(0.5, 1.0 + 0.15 * noise * rng.standard_normal())
    offset = 0.03 * noise * rng.standard_normal(3)
    shape = 0.8 * noise * rng.standard_normal(10)
    drift = 0.04 * noise * rng.standard_normal(3)
    drift_hz = 0.55 + 0.25 * noise * (2 * u[1] - 1)
    drift_phase = noise * 2 * np.pi * u[2]
    both = u[3] < 0.5 * min(noise, 1.0)
    obj_jitter = 0.01 * noise * rng.standard_normal(3)

    frames = np.zeros((length, FRAME_DIM))
    hands = (LEFT, RIGHT) if both else (RIGHT,)
    objects = []
    w_rot = 2 * np.pi * fam["rot_hz"] * speed
    w_flex = 2 * np.pi * fam["flex_hz"] * speed
    sway = np.sin(2 * np.pi * drift_hz * tau + drift_phase)[:, None]
    for h in hands:
        flip = np.array([-1.0, 1.0, 1.0]) if h == LEFT else np.ones(3)
        rflip = np.array([1.0, -1.0, -1.0]) if h == LEFT else np.ones(3)
        trans = HAND_CENTERS[h] + flip * (offset + sway * drift)
        pose = np.zeros((length, 16, 3))
        pose[:, 0] = rflip * (np.array(fam["rot0"]) + amp * np.sin(w_rot * tau + phase)[:, None] * np.array(fam["rot"]))
        flex = np.array(fam["flex0"]) + amp * np.array(fam["flex1"]) * np.sin(
            w_flex * tau[:, None] + phase + np.array(fam["lag"]))
        for f in range(5):
            axis = _BEND_AXES[f] * (rflip if f == 0 else 1.0)
            for i in range(3):
                pose[:, 1 + 3 * f + i] = (flex[:, f] * _JOINT_RATIO[i])[:, None] * axis
        mano = np.concatenate([trans, pose.reshape(length, 48), np.broadcast_to(shape, (length, 10))], 1)
        frames[:, flag_index(h)] = 1.0
        frames[:, mano_slice(h)] = mano
        if fam["obj"] is not None:
            center = HAND_CENTERS[h] + flip * (offset + np.array(fam["obj"]) + obj_jitter)
            objects.append(center + OBJECT_RADIUS * _sphere_points(OBJECT_POINTS))
    objects = np.concatenate(objects) if objects else np.zeros((0, 3))
    return frames, objects


def attach_contacts(frames: np.ndarray, objects: np.ndarray, skel=None) -> np.ndarray:
    """Fill contact blocks from FK joints against the object cloud."""
    frames = frames.copy()
    for h in (LEFT, RIGHT):
        present = frames[:, flag_index(h)] >= 0.5
        if objects.shape[0] == 0 or not present.any():
            frames[:, contact_slice(h)] = 0.0
            continue
        joints = forward_kinematics(frames[:, mano_slice(h)], skel)
        frames[:, contact_slice(h)] = contact_values(joints, objects) * present[:, None]
    return frames


def generate_synthetic_dataset(spec: SyntheticSpec | None = None, seed: int = 0) -> Dataset:
    spec = spec or SyntheticSpec()
    spec.validate()
    skel = default_skeleton()
    records = []
    splits = {"train": [], "val": [], "test": []}
    seq_id = 0
    for c in range(spec.num_classes):
        fam = FAMILIES[c]
        class_rng = np.random.default_rng(np.random.SeedSequence([seed, c]))
        n = spec.seqs_per_class
        n_val = max(1, int(round(spec.split[1] * n)))
        n_test = max(1, int(round(spec.split[2] * n)))
        n_train = n - n_val - n_test
        order = class_rng.permutation(n)
        for k in range(n):
            length = int(class_rng.integers(spec.min_len, spec.max_len + 1))
            frames, objects = synth_sequence(fam, length, spec.noise, class_rng, spec.fps)
            frames, objects = _f32(frames), _f32(objects)
            frames = _f32(attach_contacts(frames, objects, skel))
            records.append(SequenceRecord(seq_id, c, frames, objects, Camera()))
            slot = order[k]
            name = "train" if slot < n_train else ("val" if slot < n_train + n_val else "test")
            splits[name].append(seq_id)
            seq_id += 1

    train = [records[i] for i in splits["train"]]
    padded = np.stack([pad_frames(r.frames, spec.max_frames) for r in train])
    stats = compute_norm_stats(padded, [r.length for r in train])
    manifest = DatasetManifest(
        SCHEMA_VERSION, spec.num_classes, [FAMILIES[c]["name"] for c in range(spec.num_classes)],
        spec.max_frames, FRAME_DIM, splits, stats.mean.tolist(), stats.std.tolist(),
        int(seed), spec.hash(), spec.to_dict())
    return Dataset(manifest, records)


# ---------------------------------------------------------------- dataset files

def encode_record(rec: SequenceRecord) -> bytes:
    frames = np.asarray(rec.frames, dtype="<f4")
    objects = np.asarray(rec.objects, dtype="<f4").reshape(-1, 3)
    header = HEADER.pack(MAGIC, RECORD_VERSION, rec.seq_id, rec.label, frames.shape[0], objects.shape[0])
    return header + frames.tobytes() + objects.tobytes() + np.asarray(rec.camera.to_vector(), dtype="<f4").tobytes()


def decode_records(blob: bytes) -> list[SequenceRecord]:
    out = []
    pos = 0
    while pos < len(blob):
        if len(blob) - pos < HEADER.size:
            raise DatasetFormatError(f"truncated record header at byte {pos}")
        magic, version, seq_id, label, length, m = HEADER.unpack_from(blob, pos)
        if magic != MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r} at byte {pos}; not a TSHM record stream")
        if version != RECORD_VERSION:
            raise DatasetFormatError(f"record version {version} unsupported (expected {RECORD_VERSION})")
        pos += HEADER.size
        sizes = (length * FRAME_DIM, m * 3, CAMERA_VECTOR_DIM)
        need = 4 * sum(sizes)
        if len(blob) - pos < need:
            raise DatasetFormatError(f"record for sequence {seq_id} is truncated "
                                     f"({len(blob) - pos} of {need} payload bytes)")
        vals = np.frombuffer(blob, dtype="<f4", count=sum(sizes), offset=pos).astype(np.float64)
        pos += need
        frames = vals[:sizes[0]].reshape(length, FRAME_DIM)
        objects = vals[sizes[0]:sizes[0] + sizes[1]].reshape(m, 3)
        camera = Camera.from_vector(vals[sizes[0] + sizes[1]:])
        out.append(SequenceRecord(int(seq_id), int(label), frames, objects, camera))
    return out


def manifest_to_json(manifest: DatasetManifest) -> str:
    return json.dumps(asdict(manifest), indent=1, sort_keys=True) + "\n"


def write_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / MANIFEST_NAME).write_text(manifest_to_json(dataset.manifest))
    with open(path / RECORDS_NAME, "wb") as fh:
        for rec in dataset.records:
            fh.write(encode_record(rec))
    return path


def read_dataset(path) -> Dataset:
    path = Path(path)
    if not (path / MANIFEST_NAME).exists():
        raise FileNotFoundError(f"no dataset manifest at {path / MANIFEST_NAME}")
    doc = json.loads((path / MANIFEST_NAME).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DatasetFormatError(f"manifest schema {doc.get('schema_version')} unsupported")
    manifest = DatasetManifest(**doc)
    records = decode_records((path / RECORDS_NAME).read_bytes())
    return Dataset(manifest, records)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    student: Denoiser
    teacher: Denoiser | None
    optim: dict
    progress: dict


def _model_arrays(prefix: str, model: Denoiser) -> dict:
    out = {f"{prefix}/param/{k}": p.data for k, p in model.params.items()}
    out.update({f"{prefix}/buffer/{k}": v for k, v in model.buffers.items()})
    return out


def save_checkpoint(path, student: Denoiser, teacher: Denoiser | None = None,
                    optim: dict | None = None, progress: dict | None = None) -> Path:
    """Write models, optimizer moments and training progress to one ``.npz``.

    ``optim`` maps a model role ("student"/"teacher") to its :class:`AdamState`.
    """
    arrays = _model_arrays("student", student)
    meta = {"format": "tshamo-checkpoint", "version": 1,
            "student_config": student.config.to_dict(),
            "teacher_config": teacher.config.to_dict() if teacher is not None else None,
            "optim_steps": {}, "progress": progress or {}}
    if teacher is not None:
        arrays.update(_model_arrays("teacher", teacher))
    for role, state in (optim or {}).items():
        meta["optim_steps"][role] = state.step
        for k in state.m:
            arrays[f"optim/{role}/m/{k}"] = state.m[k]
            arrays[f"optim/{role}/v/{k}"] = state.v[k]
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def _restore(prefix: str, config: DenoiserConfig, arrays, into: Denoiser | None) -> Denoiser:
    model = into if into is not None else Denoiser.create(config, 0)
    if into is not None and into.config != config:
        diffs = [k for k, v in config.to_dict().items() if into.config.to_dict().get(k) != v]
        raise CheckpointError(f"{prefix} config mismatch on field(s) {diffs}")
    stored = {k[len(prefix) + 7:]: k for k in arrays if k.startswith(prefix + "/param/")}
    for name, p in model.params.items():
        key = stored.get(name)
        if key is None:
            raise CheckpointError(f"{prefix} parameter {name!r} missing from checkpoint")
        arr = arrays[key]
        if arr.shape != p.shape:
            raise CheckpointError(f"{prefix} parameter {name!r}: checkpoint shape {arr.shape} "
                                  f"!= model shape {p.shape}")
        p.data = np.array(arr, dtype=np.float64)
    extra = sorted(set(stored) - set(model.params))
    if extra:
        raise CheckpointError(f"{prefix} checkpoint has unexpected parameter {extra[0]!r}")
    for k in list(model.buffers):
        key = f"{prefix}/buffer/{k}"
        if key in arrays:
            model.buffers[k] = np.array(arrays[key])
    return model


def load_checkpoint(path, student: Denoiser | None = None,
                    teacher: Denoiser | None = None) -> Checkpoint:
    """Load a checkpoint; models passed in are filled in place after shape checks."""
    with np.load(Path(path), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays.pop("__meta__")))
    if meta.get("format") != "tshamo-checkpoint" or meta.get("version") != 1:
        raise CheckpointError("not a tshamo checkpoint (format/version)")
    s = _restore("student", DenoiserConfig.from_dict(meta["student_config"]), arrays, student)
    t = None
    if meta["teacher_config"] is not None:
        t = _restore("teacher", DenoiserConfig.from_dict(meta["teacher_config"]), arrays, teacher)
    optim = {}
    for role, step in meta["optim_steps"].items():
        m = {k.split("/", 3)[3]: v for k, v in arrays.items() if k.startswith(f"optim/{role}/m/")}
        v = {k.split("/", 3)[3]: a for k, a in arrays.items() if k.startswith(f"optim/{role}/v/")}
        optim[role] = AdamState(step, m, v)
    return Checkpoint(s, t, optim, meta["progress"])
