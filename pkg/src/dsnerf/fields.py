"""Learnable fields: body MLP, lighting MLP, pose encoder and frame latents.

Parameters live in a flat ordered mapping of float64 arrays (``FieldParams``).
Each network is described by an :class:`Mlp` layout that knows its parameter
names and builds its forward graph on an :class:`~dsnerf.autodiff.Tape`.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, EvaluationError, MeshFormatError

LATENT_DIM = 8
LIGHT_MODES = ("scalar", "none", "color")
CHECKPOINT_MAGIC = b"DSNFCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    width: int = 128
    pe_freqs: int = 10
    include_input: bool = True
    pose_dim: int = 32
    pose_width: int = 128
    latent_dim: int = LATENT_DIM
    body_depth: int = 8
    body_skip: int = 4
    light_depth: int = 4
    light_width: int = 128
    light_pe_freqs: int = 0
    pose_depth: int = 3
    light_mode: str = "scalar"
    joint_count: int = 12

    def __post_init__(self):
        if self.light_mode not in LIGHT_MODES:
            raise ConfigError(f"light_mode must be one of {LIGHT_MODES}")
        if self.body_depth < 1 or self.pose_depth < 1 or self.light_depth < 1:
            raise ConfigError("network depths must be positive")
        if not 0 <= self.body_skip < self.body_depth:
            raise ConfigError("body_skip must index a body layer")

    @property
    def pose_input_dim(self) -> int:
        return 4 * (self.joint_count - 1)

    @property
    def body_input_dim(self) -> int:
        pe = 3 * 2 * self.pe_freqs + (3 if self.include_input or self.pe_freqs == 0 else 0)
        return pe + self.pose_dim + self.latent_dim

    def light_input_dim(self) -> int:
        pe = 3 * 2 * self.light_pe_freqs + 3 if self.light_pe_freqs else 3
        base = pe + 6
        return base + 3 if self.light_mode == "color" else base

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class Mlp:
    """Fully connected stack; ReLU after every layer except an optional linear last one.

    ``skip`` names the layer whose input is the previous activation
    concatenated with the network input.
    """

    name: str
    sizes: tuple[int, ...]
    skip: int | None = None
    linear_last: bool = True

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ConfigError("an MLP needs at least one layer")
        if self.skip is not None and not 0 < self.skip < len(self.sizes) - 1:
            raise ConfigError(f"shortcut layer {self.skip} out of range for {self.name}")

    @property
    def depth(self) -> int:
        return len(self.sizes) - 1

    def layer_shape(self, i: int) -> tuple[int, int]:
        fan_in = self.sizes[i] + (self.sizes[0] if i == self.skip else 0)
        return fan_in, self.sizes[i + 1]

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for i in range(self.depth):
            fi, fo = self.layer_shape(i)
            out.append((f"{self.name}.{i}.W", (fi, fo)))
            out.append((f"{self.name}.{i}.b", (fo,)))
        return out

    def __call__(self, x: ad.Var, p: dict[str, ad.Var]) -> ad.Var:
        h = x
        for i in range(self.depth):
            if i == self.skip:
                h = ad.concat([h, x])
            h = ad.linear(h, p[f"{self.name}.{i}.W"], p[f"{self.name}.{i}.b"])
            if i < self.depth - 1 or not self.linear_last:
                h = ad.relu(h)
        return h


def networks(config: FieldConfig) -> dict[str, Mlp]:
    w = config.width
    nets = {
        "pose": Mlp("pose", (config.pose_input_dim,) + (config.pose_width,) * (config.pose_depth - 1) + (config.pose_dim,)),
        "body": Mlp("body", (config.body_input_dim,) + (w,) * config.body_depth, skip=config.body_skip or None, linear_last=False),
        "body_sigma": Mlp("body_sigma", (w, 1)),
        "body_tex": Mlp("body_tex", (w, 3)),
    }
    if config.light_mode != "none":
        lw = config.light_width
        out = 1 if config.light_mode == "scalar" else 3
        nets["light"] = Mlp("light", (config.light_input_dim(),) + (lw,) * config.light_depth + (out,))
    return nets


@dataclass
class FieldParams:
    config: FieldConfig
    arrays: dict[str, np.ndarray]
    frame_count: int

    @property
    def latent(self) -> np.ndarray:
        return self.arrays["latent"]

    @property
    def has_lighting(self) -> bool:
        return self.config.light_mode != "none"

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "FieldParams":
        return FieldParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.frame_count)

    def attach(self, tape: ad.Tape) -> dict[str, ad.Var]:
        return {k: tape.var(v, name=k) for k, v in self.arrays.items()}

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


def init_params(config: FieldConfig, frame_count: int, seed: int) -> FieldParams:
    """Uniform fan-in weights, zero biases, N(0, 1) frame latents.

    The lighting output layer starts at zero, so scalar lightness is exactly
    1 everywhere (and colour mode starts at 0.5 grey).
    """
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    nets = networks(config)
    for net in nets.values():
        for name, shape in net.param_shapes():
            if name.endswith(".W"):
                bound = np.sqrt(6.0 / shape[0])
                arrays[name] = rng.uniform(-bound, bound, size=shape)
            else:
                arrays[name] = np.zeros(shape)
    if "light" in nets:
        # a zero output layer keeps lighting neutral until training moves it
        last = nets["light"].depth - 1
        arrays[f"light.{last}.W"] = np.zeros_like(arrays[f"light.{last}.W"])
    arrays["latent"] = rng.standard_normal((frame_count, config.latent_dim))
    return FieldParams(config, arrays, frame_count)


# --------------------------------------------------------------------------
# graph builders


def _check_finite(*xs):
    for x in xs:
        if not np.all(np.isfinite(x)):
            raise EvaluationError("non-finite field input")


def pose_input(joint_rotations: np.ndarray) -> np.ndarray:
    """Non-root joint quaternions flattened; root orientation and translation are excluded."""
    q = np.asarray(joint_rotations, dtype=np.float64)
    return q[1:].reshape(1, -1)


def pose_graph(config: FieldConfig, p: dict[str, ad.Var], joint_rotations: np.ndarray) -> ad.Var:
    x = pose_input(joint_rotations)
    if x.shape[1] != config.pose_input_dim:
        raise ConfigError(f"pose encoder expects {config.pose_input_dim} inputs, got {x.shape[1]}")
    tape = next(iter(p.values())).tape
    return networks(config)["pose"](tape.const(x), p)


def body_graph(config: FieldConfig, p: dict[str, ad.Var], pc: ad.Var, J: ad.Var, latent: ad.Var):
    """Density (N, 1) and texture (N, 3) nodes for canonical points ``pc``."""
    n = pc.shape[0]
    nets = networks(config)
    enc = ad.positional_encoding(pc, config.pe_freqs, config.include_input)
    x = ad.concat([enc, ad.broadcast_rows(J, n), ad.broadcast_rows(latent, n)])
    h = nets["body"](x, p)
    sigma = ad.softplus(nets["body_sigma"](h, p))
    tex = ad.sigmoid(nets["body_tex"](h, p))
    return sigma, tex


_SOFTPLUS_ZERO = float(np.logaddexp(0.0, 0.0))


def light_graph(config: FieldConfig, p: dict[str, ad.Var], pw, dw, nw, tex: ad.Var | None = None) -> ad.Var:
    """Lightness (N, 1) in scalar mode, colour (N, 3) in colour mode."""
    tape = next(iter(p.values())).tape
    pw = np.asarray(pw, dtype=np.float64)
    pos = ad.positional_encoding(tape.const(pw), config.light_pe_freqs) if config.light_pe_freqs else tape.const(pw)
    parts = [pos, tape.const(np.concatenate([dw, nw], axis=1))]
    if config.light_mode == "color":
        parts.append(tex)
    z = networks(config)["light"](ad.concat(parts), p)
    if config.light_mode == "color":
        return ad.sigmoid(z)
    return ad.scale(ad.softplus(z), 1.0 / _SOFTPLUS_ZERO)


# --------------------------------------------------------------------------
# numpy-facing entry points


def positional_encode(x, L: int, include_input: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    tape = ad.Tape()
    out = ad.positional_encoding(tape.var(np.atleast_2d(x)), L, include_input).value
    return out[0] if single else out


def pose_feature(params: FieldParams, joint_rotations) -> np.ndarray:
    """Pose feature J of shape (pose_dim,). Accepts a Pose or a (J, 4) array."""
    q = getattr(joint_rotations, "joint_rotations", joint_rotations)
    tape = ad.Tape()
    return pose_graph(params.config, params.attach(tape), q).value[0]


def _rows(x, width):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, width), x.ndim == 1


def body_forward(params: FieldParams, p_c, J, latent):
    """Density (>= 0) and texture in (0, 1)^3 at canonical points."""
    pc, single = _rows(p_c, 3)
    J = np.asarray(J, dtype=np.float64).reshape(1, -1)
    latent = np.asarray(latent, dtype=np.float64).reshape(1, -1)
    _check_finite(pc, J, latent)
    tape = ad.Tape()
    p = params.attach(tape)
    sigma, tex = body_graph(params.config, p, tape.const(pc), tape.const(J), tape.const(latent))
    s, t = sigma.value[:, 0], tex.value
    return (s[0], t[0]) if single else (s, t)


DensityFn = Callable[[ad.Tape, ad.Var], ad.Var]


def density_gradient(density: DensityFn, points) -> np.ndarray:
    """Per-point gradient of an (N, 1) density graph with respect to its input."""
    pts, _ = _rows(points, 3)
    tape = ad.Tape()
    x = tape.var(pts)
    sigma = density(tape, x)
    return tape.backward(sigma, seed=np.ones(sigma.shape), wrt=[x])[x]


def normals_from_gradient(grad: np.ndarray, fallback) -> np.ndarray:
    """``-grad / |grad|``, taking ``fallback`` rows where the gradient vanishes."""
    norm = np.linalg.norm(grad, axis=-1, keepdims=True)
    weak = norm[:, 0] < 1e-8
    n = -grad / np.where(weak[:, None], 1.0, norm)
    if np.any(weak):
        fb = np.broadcast_to(np.asarray(fallback, dtype=np.float64), grad.shape)
        n[weak] = fb[weak]
    return n


def body_normal(params: FieldParams, p_c, J, latent, fallback=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Negated, normalised density gradient at canonical points.

    ``fallback`` supplies unit normals (one per point, or one shared) used
    where the gradient norm drops below 1e-8; the rendering pipeline passes
    the normals of the matched canonical faces.
    """
    pc, single = _rows(p_c, 3)
    J = np.asarray(J, dtype=np.float64).reshape(1, -1)
    latent = np.asarray(latent, dtype=np.float64).reshape(1, -1)
    _check_finite(pc, J, latent)
    cfg = params.config

    def density(tape, x):
        p = params.attach(tape)
        return body_graph(cfg, p, x, tape.const(J), tape.const(latent))[0]

    n = normals_from_gradient(density_gradient(density, pc), fallback)
    return n[0] if single else n


def light_forward(params: FieldParams, p_w, d_w, n_w, tex=None) -> np.ndarray:
    if not params.has_lighting:
        pw, single = _rows(p_w, 3)
        s = np.ones(len(pw))
        return s[0] if single else s
    pw, single = _rows(p_w, 3)
    dw, _ = _rows(d_w, 3)
    nw, _ = _rows(n_w, 3)
    _check_finite(pw, dw, nw)
    tape = ad.Tape()
    p = params.attach(tape)
    t = None if tex is None else tape.const(_rows(tex, 3)[0])
    out = light_graph(params.config, p, pw, dw, nw, t).value
    if params.config.light_mode == "scalar":
        out = out[:, 0]
    return out[0] if single else out


def shade(s, t) -> np.ndarray:
    """Colour as lightness times texture; clamping happens at composite time."""
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    return s[..., None] * t if s.ndim == t.ndim - 1 else s * t


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: FieldParams, extra_blocks: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, extra_blocks, meta))


def checkpoint_bytes(params: FieldParams, extra_blocks=None, meta=None) -> bytes:
    header = {"config": asdict(params.config), "frame_count": params.frame_count, "meta": meta or {}}
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
    buf.write(head)
    blocks = list(params.arrays.items()) + list((extra_blocks or {}).items())
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = arr.tobytes()
        buf.write(struct.pack("<Q", len(data)))
        buf.write(data)
    return buf.getvalue()


def load_checkpoint(path):
    """Returns ``(params, extra_blocks, meta)``."""
    data = Path(path).read_bytes()
    return parse_checkpoint(data)


def parse_checkpoint(data: bytes):
    try:
        return _parse_checkpoint(data)
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, MeshFormatError):
            raise
        raise MeshFormatError(f"corrupt checkpoint: {exc}") from exc


def _parse_checkpoint(data: bytes):
    if data[:8] != CHECKPOINT_MAGIC:
        raise MeshFormatError("not a checkpoint file")
    view = memoryview(data)
    pos = 8
    version, hlen = struct.unpack_from("<II", view, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise MeshFormatError(f"unsupported checkpoint version {version}")
    header = json.loads(bytes(view[pos : pos + hlen]))
    pos += hlen
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos : pos + nlen]).decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", view, pos)
        pos += 8
        if pos + nbytes > len(data):
            raise MeshFormatError("checkpoint is truncated")
        blocks[name] = np.frombuffer(view[pos : pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        pos += nbytes
    config = FieldConfig.from_dict(header["config"])
    expected = [n for net in networks(config).values() for n, _ in net.param_shapes()] + ["latent"]
    arrays = {n: blocks.pop(n) for n in expected}
    return FieldParams(config, arrays, header["frame_count"]), blocks, header.get("meta", {})
