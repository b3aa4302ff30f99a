"""Student and teacher x0-denoisers over two interchangeable backbones.

``transformer_encdec``
    Student: one condition token (label + timestep) prepended to the projected
    frames and run through a transformer encoder.  Teacher: the encoder reads
    the condition token plus five auxiliary tokens, and a decoder over the noisy
    frames cross-attends to that memory.

``conv_unet``
    A 1-D convolutional U-Net with three resolution levels.  The condition
    vector modulates every block (scale/shift); the teacher additionally
    receives the auxiliary frames as extra input channels broadcast over time.

Both roles share call signatures with every backbone, so training and
evaluation code never branches on the architecture.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .motion import (FRAME_DIM, LEFT, MAX_FRAMES, RIGHT, Camera, HandSkeleton,
                     MotionSequence, contact_slice, default_skeleton, flag_index,
                     forward_kinematics, mano_slice, project_2d, rasterize_mask)

AUX_KINDS = ("mano_params", "joints_3d", "joints_2d", "hand_masks", "mano_plus_contact")
AUX_WIDTHS = {"mano_params": 122, "joints_3d": 126, "joints_2d": 84,
              "hand_masks": 256, "mano_plus_contact": 164}
BACKBONES = ("transformer_encdec", "conv_unet")
NUM_AUX_FRAMES = 5
AUX_PERCENTILES = (0.0, 0.25, 0.5, 0.75, 1.0)
NULL_LABEL = -1
_MASK_BIAS = -1e9


# ---------------------------------------------------------------- conditioning

def embed_timestep(t, d_model: int, base: float = 1e4) -> np.ndarray:
    """Interleaved sinusoidal encoding ``[sin(t w0), cos(t w0), sin(t w1), ...]``
    with ``w_i = base ** (-2i / d_model)``.  Accepts a scalar or array of steps."""
    t = np.asarray(t, dtype=np.float64)
    freqs = base ** (-2.0 * np.arange(d_model // 2) / d_model)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (d_model,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def aux_positions(length: int) -> list[int]:
    if length < 1:
        raise ValueError("sequence needs at least one real frame")
    # half-up rounding, not banker's
    return [int(np.floor(p * (length - 1) + 0.5)) for p in AUX_PERCENTILES]


@dataclass
class AuxiliaryCondition:
    """Five sampled frames of one auxiliary signal.

    ``frames`` is (5, W) for a single sequence or (B, 5, W) for a batch.
    """

    kind: str
    frames: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        if self.kind not in AUX_KINDS:
            raise ValueError(f"unknown auxiliary kind {self.kind!r}")
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.positions = np.asarray(self.positions)
        if self.frames.shape[-2:] != (NUM_AUX_FRAMES, AUX_WIDTHS[self.kind]):
            raise ValueError(f"{self.kind} frames must end in ({NUM_AUX_FRAMES}, "
                             f"{AUX_WIDTHS[self.kind]}), got {self.frames.shape}")

    @property
    def batched(self) -> bool:
        return self.frames.ndim == 3

    def take(self, idx) -> AuxiliaryCondition:
        return AuxiliaryCondition(self.kind, self.frames[idx], self.positions[idx])


def aux_features(frames: np.ndarray, kind: str, camera: Camera | None = None,
                 skel: HandSkeleton | None = None) -> np.ndarray:
    """Raw per-frame auxiliary features (..., W) for frames (..., 166)."""
    if kind not in AUX_KINDS:
        raise ValueError(f"unknown auxiliary kind {kind!r}")
    f = np.asarray(frames, dtype=np.float64)
    if kind == "mano_params":
        return np.concatenate([f[..., mano_slice(LEFT)], f[..., mano_slice(RIGHT)]], -1)
    if kind == "mano_plus_contact":
        return np.concatenate([f[..., mano_slice(LEFT)], f[..., contact_slice(LEFT)],
                               f[..., mano_slice(RIGHT)], f[..., contact_slice(RIGHT)]], -1)

    skel = skel or default_skeleton()
    camera = camera or Camera()
    present = [f[..., flag_index(h)] >= 0.5 for h in (LEFT, RIGHT)]
    joints = [forward_kinematics(f[..., mano_slice(h)], skel) for h in (LEFT, RIGHT)]
    if kind == "joints_3d":
        parts = [j.reshape(j.shape[:-2] + (63,)) * p[..., None] for j, p in zip(joints, present)]
        return np.concatenate(parts, -1)

    uv = []
    for j, p in zip(joints, present):
        # absent hands sit at the origin; park them in front of the camera and drop later
        safe = np.where(p[..., None, None], j, np.array([0.0, 0.0, 1.0]))
        uv.append(project_2d(safe, camera))
    if kind == "joints_2d":
        parts = [q.reshape(q.shape[:-2] + (42,)) * p[..., None] for q, p in zip(uv, present)]
        return np.concatenate(parts, -1)

    # hand_masks
    lead = f.shape[:-1]
    out = np.zeros(lead + (256,))
    for idx in np.ndindex(*lead):
        pts = [uv[h][idx] for h in (LEFT, RIGHT) if present[h][idx]]
        if pts:
            out[idx] = rasterize_mask(np.concatenate(pts), 16, (camera.width, camera.height))
    return out


def encode_auxiliary(seq: MotionSequence, kind: str, camera: Camera | None = None,
                     skel: HandSkeleton | None = None) -> AuxiliaryCondition:
    pos = aux_positions(seq.length)
    return AuxiliaryCondition(kind, aux_features(seq.frames[pos], kind, camera, skel), np.array(pos))


def encode_auxiliary_batch(frames: np.ndarray, lengths, kind: str, cameras=None,
                           skel: HandSkeleton | None = None) -> AuxiliaryCondition:
    """Batched :func:`encode_auxiliary` over raw (S, N, 166) frames."""
    frames = np.asarray(frames)
    pos = np.array([aux_positions(int(n)) for n in lengths])
    picked = frames[np.arange(len(frames))[:, None], pos]
    if kind in ("joints_2d", "hand_masks") and cameras is not None:
        feats = np.stack([aux_features(picked[i], kind, cameras[i], skel) for i in range(len(frames))])
    else:
        cam = cameras[0] if cameras is not None and len(cameras) else None
        feats = aux_features(picked, kind, cam, skel)
    return AuxiliaryCondition(kind, feats, pos)


def cfg_dropout(label, aux, p_uncond: float, rng: np.random.Generator):
    """Drop label and auxiliary condition jointly with probability ``p_uncond``."""
    if not 0.0 <= p_uncond <= 1.0:
        raise ValueError("p_uncond must lie in [0, 1]")
    if rng.random() < p_uncond:
        return None, None
    return label, aux


def cfg_drop_mask(batch: int, p_uncond: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= p_uncond <= 1.0:
        raise ValueError("p_uncond must lie in [0, 1]")
    return rng.random(batch) < p_uncond


# ---------------------------------------------------------------- model container

@dataclass(frozen=True)
class DenoiserConfig:
    backbone: str = "transformer_encdec"
    role: str = "student"
    num_labels: int = 6
    d_model: int = 128
    num_layers: int = 4
    num_heads: int = 4
    max_len: int = MAX_FRAMES
    aux_kind: str | None = None
    frame_dim: int = FRAME_DIM
    ff_mult: int = 2
    aux_channels: int = 16

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.role not in ("student", "teacher"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "student" and self.aux_kind is not None:
            raise ValueError("student configs carry no auxiliary kind")
        if self.role == "teacher" and self.aux_kind not in AUX_KINDS:
            raise ValueError(f"teacher needs an auxiliary kind from {AUX_KINDS}")
        if self.d_model % self.num_heads or self.d_model % 2:
            raise ValueError("d_model must be even and divisible by num_heads")
        if self.backbone == "conv_unet" and self.max_len % 4:
            raise ValueError("conv_unet needs max_len divisible by 4")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DenoiserConfig:
        return cls(**d)


class TextEmbedding:
    """Learned label table; the final row is the null condition."""

    def __init__(self, table: Tensor):
        self.table = table

    @property
    def num_labels(self) -> int:
        return self.table.shape[0] - 1

    @property
    def null_index(self) -> int:
        return self.num_labels

    def ids(self, labels, batch: int) -> np.ndarray:
        if labels is None:
            return np.full(batch, self.null_index)
        ids = np.broadcast_to(np.asarray(labels, dtype=np.int64), (batch,)).copy()
        ids[ids == NULL_LABEL] = self.null_index
        if ids.min() < 0 or ids.max() > self.null_index:
            raise ValueError(f"label ids must lie in [0, {self.num_labels}) or be null")
        return ids

    def __call__(self, labels, batch: int) -> Tensor:
        return dc.embedding(self.table, self.ids(labels, batch))


class Denoiser:
    def __init__(self, config: DenoiserConfig, params: dict[str, Tensor],
                 buffers: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params
        self.buffers = buffers if buffers is not None else default_buffers(config)

    @classmethod
    def create(cls, config: DenoiserConfig, seed: int = 0) -> Denoiser:
        return cls(config, init_params(config, np.random.default_rng(seed)))

    @property
    def text(self) -> TextEmbedding:
        return TextEmbedding(self.params["text.table"])

    @property
    def role(self) -> str:
        return self.config.role

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def param_shapes(self) -> dict[str, tuple]:
        return {k: p.shape for k, p in self.params.items()}

    def set_aux_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        std = np.where(std > 1e-8, std, 1.0)
        self.buffers["aux_mean"] = np.asarray(mean, dtype=np.float64)
        self.buffers["aux_std"] = np.asarray(std, dtype=np.float64)


def default_buffers(config: DenoiserConfig) -> dict[str, np.ndarray]:
    if config.role != "teacher":
        return {}
    w = AUX_WIDTHS[config.aux_kind]
    return {"aux_mean": np.zeros(w), "aux_std": np.ones(w)}


# ---------------------------------------------------------------- parameters

def param_specs(cfg: DenoiserConfig) -> dict[str, tuple]:
    """Every parameter name and shape, derived from the config alone."""
    D, F = cfg.d_model, cfg.frame_dim
    specs: dict[str, tuple] = {"text.table": (cfg.num_labels + 1, D)}

    def lin(name, i, o):
        specs[name + ".w"] = (i, o)
        specs[name + ".b"] = (o,)

    def norm(name, d):
        specs[name + ".g"] = (d,)
        specs[name + ".b"] = (d,)

    lin("time.l1", D, D)
    lin("time.l2", D, D)
    teacher = cfg.role == "teacher"
    aux_w = AUX_WIDTHS[cfg.aux_kind] if teacher else 0

    if cfg.backbone == "transformer_encdec":
        H = D * cfg.ff_mult

        def enc_layer(name):
            norm(name + ".ln1", D)
            lin(name + ".qkv", D, 3 * D)
            lin(name + ".proj", D, D)
            norm(name + ".ln2", D)
            lin(name + ".ff1", D, H)
            lin(name + ".ff2", H, D)

        lin("in", F, D)
        specs["pos"] = (cfg.max_len, D)
        if teacher:
            lin("aux.in", aux_w, D)
            specs["aux.pos"] = (NUM_AUX_FRAMES, D)
            specs["aux.null"] = (NUM_AUX_FRAMES, D)
            for i in range(cfg.num_layers):
                enc_layer(f"enc{i}")
            norm("enc.ln", D)
            for i in range(cfg.num_layers):
                name = f"dec{i}"
                enc_layer(name)
                norm(name + ".lnx", D)
                lin(name + ".q", D, D)
                lin(name + ".kv", D, 2 * D)
                lin(name + ".xproj", D, D)
        else:
            for i in range(cfg.num_layers):
                enc_layer(f"enc{i}")
        norm("out.ln", D)
        lin("out", D, F)
    else:
        widths = unet_widths(cfg)
        in_ch = F
        if teacher:
            lin("aux.in", aux_w, cfg.aux_channels)
            specs["aux.null"] = (NUM_AUX_FRAMES, cfg.aux_channels)
            in_ch += NUM_AUX_FRAMES * cfg.aux_channels

        def block(name, c):
            norm(name + ".ln", c)
            lin(name + ".film", D, 2 * c)
            lin(name + ".conv", 3 * c, c)

        lin("conv_in", 3 * in_ch, widths[0])
        block("down0", widths[0])
        lin("pool0", 2 * widths[0], widths[1])
        block("down1", widths[1])
        lin("pool1", 2 * widths[1], widths[2])
        block("mid", widths[2])
        lin("unpool1", widths[2], 2 * widths[1])
        block("up1", widths[1])
        lin("unpool0", widths[1], 2 * widths[0])
        block("up0", widths[0])
        norm("out.ln", widths[0])
        lin("out", widths[0], F)
    return specs


def unet_widths(cfg: DenoiserConfig) -> tuple[int, int, int]:
    return cfg.d_model, cfg.d_model, 2 * cfg.d_model


def init_params(cfg: DenoiserConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for name, shape in param_specs(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        elif len(shape) == 2 and name.endswith(".w"):
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            if name.endswith("film.w"):
                arr *= 0.1
        else:
            arr = rng.normal(0.0, 0.5, size=shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------- building blocks

def _linear(x, p, name):
    return x @ p[name + ".w"] + p[name + ".b"]


def _norm(x, p, name):
    return dc.layer_norm(x, p[name + ".g"], p[name + ".b"])


def _split_heads(x: Tensor, B: int, n: int, heads: int, dh: int, key: bool = False) -> Tensor:
    x = x.reshape(B, n, heads, dh)
    return x.transpose(0, 2, 3, 1) if key else x.transpose(0, 2, 1, 3)


def _attend(q, kT, v, bias, B, n, D, dh):
    scores = dc.scale(q @ kT, 1.0 / np.sqrt(dh))
    if bias is not None:
        scores = scores + bias
    out = dc.softmax(scores, axis=-1) @ v
    return out.transpose(0, 2, 1, 3).reshape(B, n, D)


def _self_attention(x, p, name, heads, bias):
    B, n, D = x.shape
    dh = D // heads
    qkv = _linear(x, p, name + ".qkv")
    q = _split_heads(qkv[:, :, :D], B, n, heads, dh)
    kT = _split_heads(qkv[:, :, D:2 * D], B, n, heads, dh, key=True)
    v = _split_heads(qkv[:, :, 2 * D:], B, n, heads, dh)
    return _linear(_attend(q, kT, v, bias, B, n, D, dh), p, name + ".proj")


def _cross_attention(x, mem, p, name, heads):
    B, n, D = x.shape
    m = mem.shape[1]
    dh = D // heads
    q = _split_heads(_linear(x, p, name + ".q"), B, n, heads, dh)
    kv = _linear(mem, p, name + ".kv")
    kT = _split_heads(kv[:, :, :D], B, m, heads, dh, key=True)
    v = _split_heads(kv[:, :, D:], B, m, heads, dh)
    return _linear(_attend(q, kT, v, None, B, n, D, dh), p, name + ".xproj")


def _ffn(x, p, name):
    return _linear(dc.gelu(_linear(x, p, name + ".ff1")), p, name + ".ff2")


def _encoder_layer(x, p, name, heads, bias):
    x = x + _self_attention(_norm(x, p, name + ".ln1"), p, name, heads, bias)
    return x + _ffn(_norm(x, p, name + ".ln2"), p, name)


def _decoder_layer(x, mem, p, name, heads, bias):
    x = x + _self_attention(_norm(x, p, name + ".ln1"), p, name, heads, bias)
    x = x + _cross_attention(_norm(x, p, name + ".lnx"), mem, p, name, heads)
    return x + _ffn(_norm(x, p, name + ".ln2"), p, name)


def _key_bias(valid: np.ndarray, heads: int, n_query: int) -> np.ndarray | None:
    """Additive attention bias (B, H, Nq, Nk) masking invalid keys."""
    if valid.all():
        return None
    B, nk = valid.shape
    row = np.where(valid, 0.0, _MASK_BIAS)[:, None, None, :]
    return np.broadcast_to(row, (B, heads, n_query, nk)).copy()


def _conv1d(x, p, name):
    B, n, c = x.shape
    pad = np.zeros((B, 1, c))
    xp = dc.concat([pad, x, pad], axis=1)
    taps = dc.concat([xp[:, 0:n], xp[:, 1:n + 1], xp[:, 2:n + 2]], axis=2)
    return _linear(taps, p, name)


def _broadcast_time(v: Tensor, n: int) -> Tensor:
    """(B, C) -> (B, n, C) via an explicit ones-matmul."""
    B, c = v.shape
    return np.ones((n, 1)) @ v.reshape(B, 1, c)


def _unet_block(h, cond, p, name):
    B, n, c = h.shape
    film = _broadcast_time(_linear(cond, p, name + ".film"), n)
    gain, shift = film[:, :, :c] + 1.0, film[:, :, c:]
    r = dc.gelu(_norm(h, p, name + ".ln") * gain + shift)
    return h + _conv1d(r, p, name + ".conv")


def _resample_down(h, p, name):
    B, n, c = h.shape
    return _linear(h.reshape(B, n // 2, 2 * c), p, name)


def _resample_up(h, p, name):
    B, n, c = h.shape
    up = _linear(h, p, name)
    return up.reshape(B, 2 * n, up.shape[-1] // 2)


# ---------------------------------------------------------------- forward passes

def _prepare(model: Denoiser, x_t, t, lengths):
    x = np.asarray(getattr(x_t, "data", x_t), dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    B, n, F = x.shape
    if F != model.config.frame_dim or n > model.config.max_len:
        raise ValueError(f"x_t must be (B, <= {model.config.max_len}, {model.config.frame_dim}), "
                         f"got {x.shape}")
    t = np.broadcast_to(np.asarray(t), (B,))
    if lengths is None:
        valid = np.ones((B, n), dtype=bool)
    else:
        valid = np.arange(n)[None, :] < np.broadcast_to(np.asarray(lengths), (B,))[:, None]
    return x, single, t, valid


def _condition(model: Denoiser, labels, t, B: int) -> Tensor:
    p = model.params
    temb = Tensor(embed_timestep(t, model.config.d_model))
    temb = _linear(dc.gelu(_linear(temb, p, "time.l1")), p, "time.l2")
    return model.text(labels, B) + temb


def _aux_tokens(model: Denoiser, aux: AuxiliaryCondition | None, aux_null, B: int, width: int,
                pos: str | None) -> Tensor:
    """Projected auxiliary tokens (B, 5, width), with null tokens where dropped."""
    p = model.params
    null = p["aux.null"]
    if aux is None:
        return np.ones((B, NUM_AUX_FRAMES, width)) * null
    if aux.kind != model.config.aux_kind:
        raise ValueError(f"auxiliary kind {aux.kind!r} does not match teacher's "
                         f"{model.config.aux_kind!r}")
    frames = aux.frames if aux.batched else aux.frames[None]
    if frames.shape[0] != B:
        frames = np.broadcast_to(frames, (B,) + frames.shape[1:])
    z = (frames - model.buffers["aux_mean"]) / model.buffers["aux_std"]
    tok = _linear(Tensor(z), p, "aux.in")
    if pos is not None:
        tok = tok + p[pos]
    if aux_null is None or not np.any(aux_null):
        return tok
    keep = np.broadcast_to((~np.asarray(aux_null, dtype=bool))[:, None, None].astype(np.float64),
                           (B, NUM_AUX_FRAMES, width)).copy()
    return tok * keep + (1.0 - keep) * null


def _transformer_student(model, x, cond, valid):
    cfg, p = model.config, model.params
    B, n, _ = x.shape
    frames = _linear(Tensor(x), p, "in") + p["pos"][:n]
    h = dc.concat([cond.reshape(B, 1, cfg.d_model), frames], axis=1)
    bias = _key_bias(np.concatenate([np.ones((B, 1), bool), valid], 1), cfg.num_heads, n + 1)
    for i in range(cfg.num_layers):
        h = _encoder_layer(h, p, f"enc{i}", cfg.num_heads, bias)
    return _linear(_norm(h, p, "out.ln")[:, 1:], p, "out")


def _transformer_teacher(model, x, cond, valid, aux, aux_null):
    cfg, p = model.config, model.params
    B, n, _ = x.shape
    mem = dc.concat([cond.reshape(B, 1, cfg.d_model),
                     _aux_tokens(model, aux, aux_null, B, cfg.d_model, "aux.pos")], axis=1)
    for i in range(cfg.num_layers):
        mem = _encoder_layer(mem, p, f"enc{i}", cfg.num_heads, None)
    mem = _norm(mem, p, "enc.ln")
    h = _linear(Tensor(x), p, "in") + p["pos"][:n]
    bias = _key_bias(valid, cfg.num_heads, n)
    for i in range(cfg.num_layers):
        h = _decoder_layer(h, mem, p, f"dec{i}", cfg.num_heads, bias)
    return _linear(_norm(h, p, "out.ln"), p, "out")


def _unet(model, x, cond, valid, aux=None, aux_null=None):
    cfg, p = model.config, model.params
    B, n, F = x.shape
    if n % 4:
        raise ValueError("conv_unet needs a frame count divisible by 4")
    inp = Tensor(x * valid[:, :, None])
    if cfg.role == "teacher":
        tok = _aux_tokens(model, aux, aux_null, B, cfg.aux_channels, None)
        chans = NUM_AUX_FRAMES * cfg.aux_channels
        inp = dc.concat([inp, _broadcast_time(tok.reshape(B, chans), n)], axis=2)
    h0 = _unet_block(_conv1d(inp, p, "conv_in"), cond, p, "down0")
    h1 = _unet_block(_resample_down(h0, p, "pool0"), cond, p, "down1")
    h2 = _unet_block(_resample_down(h1, p, "pool1"), cond, p, "mid")
    u1 = _unet_block(_resample_up(h2, p, "unpool1") + h1, cond, p, "up1")
    u0 = _unet_block(_resample_up(u1, p, "unpool0") + h0, cond, p, "up0")
    return _linear(_norm(u0, p, "out.ln"), p, "out")


def student_forward(model: Denoiser, x_t, t, labels=None, lengths=None) -> Tensor:
    """Predict clean frames from noisy frames, step and label (None/-1 = null)."""
    if model.role != "student":
        raise ValueError("student_forward called on a teacher model")
    x, single, t, valid = _prepare(model, x_t, t, lengths)
    cond = _condition(model, labels, t, x.shape[0])
    if model.config.backbone == "transformer_encdec":
        out = _transformer_student(model, x, cond, valid)
    else:
        out = _unet(model, x, cond, valid)
    return out[0] if single else out


def teacher_forward(model: Denoiser, x_t, t, labels=None, aux: AuxiliaryCondition | None = None,
                    lengths=None, aux_null=None) -> Tensor:
    """Teacher prediction; ``aux=None`` (or ``aux_null`` rows) use the learned null tokens."""
    if model.role != "teacher":
        raise ValueError("teacher_forward called on a student model")
    x, single, t, valid = _prepare(model, x_t, t, lengths)
    cond = _condition(model, labels, t, x.shape[0])
    if model.config.backbone == "transformer_encdec":
        out = _transformer_teacher(model, x, cond, valid, aux, aux_null)
    else:
        out = _unet(model, x, cond, valid, aux, aux_null)
    return out[0] if single else out


def denoise(model: Denoiser, x_t, t, labels=None, aux=None, lengths=None, aux_null=None) -> Tensor:
    """Role-dispatching forward used by the sampler."""
    if model.role == "student":
        if aux is not None:
            raise ValueError("the student takes no auxiliary input")
        return student_forward(model, x_t, t, labels, lengths)
    return teacher_forward(model, x_t, t, labels, aux, lengths, aux_null)
