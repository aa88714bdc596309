"""ViT masked autoencoder used for both the student and the frozen teacher.

Parameters live in plain ``dict[str, np.ndarray]``; every forward pass wraps
them into fresh leaf Tensors so the graph is rebuilt per step.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

TEACHER_TIMESTAMPS = 3
TEACHER_BANDS = 6
CHECKPOINT_MAGIC = b"HKD1"


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 218
    image_size: int = 224
    patch_size: int = 16
    enc_dim: int = 768
    enc_layers: int = 12
    enc_heads: int = 12
    enc_mlp_dim: int = 3072
    dec_dim: int = 512
    dec_layers: int = 12
    dec_heads: int = 16
    dec_mlp_dim: int = 2048
    tap_layer: int = 8

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("patch_size must divide image_size")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("embedding dims must be divisible by their head counts")
        if self.enc_dim % 4 or self.dec_dim % 4:
            raise ValueError("embedding dims must be divisible by 4 for 2-D sin-cos positions")
        if not 1 <= self.tap_layer <= self.enc_layers:
            raise ValueError("tap_layer must lie in [1, enc_layers]")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.in_channels

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in known:
                raise ValueError(f"unknown model config key {key!r}")
            values[key] = int(value)
        return cls(**values)


def toy_config(in_channels: int = 32, image_size: int = 32, patch_size: int = 8,
               dim: int = 32, layers: int = 4, heads: int = 4, tap_layer: int = 3,
               dec_dim: int = 32, dec_layers: int = 2) -> ModelConfig:
    return ModelConfig(in_channels, image_size, patch_size, dim, layers, heads, 2 * dim,
                       dec_dim, dec_layers, heads, 2 * dec_dim, tap_layer)


# -- parameters --------------------------------------------------------------

def _block_shapes(prefix: str, d: int, m: int) -> list[tuple[str, tuple]]:
    return [
        (f"{prefix}.ln1.g", (d,)), (f"{prefix}.ln1.b", (d,)),
        (f"{prefix}.attn.qkv.weight", (d, 3 * d)), (f"{prefix}.attn.qkv.bias", (3 * d,)),
        (f"{prefix}.attn.proj.weight", (d, d)), (f"{prefix}.attn.proj.bias", (d,)),
        (f"{prefix}.ln2.g", (d,)), (f"{prefix}.ln2.b", (d,)),
        (f"{prefix}.mlp.fc1.weight", (d, m)), (f"{prefix}.mlp.fc1.bias", (m,)),
        (f"{prefix}.mlp.fc2.weight", (m, d)), (f"{prefix}.mlp.fc2.bias", (d,)),
    ]


def param_shapes(cfg: ModelConfig, with_decoder: bool = True) -> list[tuple[str, tuple]]:
    L, D = cfg.patch_dim, cfg.enc_dim
    shapes = [("patch_embed.weight", (L, D)), ("patch_embed.bias", (D,))]
    for i in range(cfg.enc_layers):
        shapes += _block_shapes(f"enc.{i}", D, cfg.enc_mlp_dim)
    shapes += [("enc_norm.g", (D,)), ("enc_norm.b", (D,))]
    if with_decoder:
        Dd = cfg.dec_dim
        shapes += [("dec_embed.weight", (D, Dd)), ("dec_embed.bias", (Dd,)),
                   ("mask_token", (Dd,))]
        for i in range(cfg.dec_layers):
            shapes += _block_shapes(f"dec.{i}", Dd, cfg.dec_mlp_dim)
        shapes += [("dec_norm.g", (Dd,)), ("dec_norm.b", (Dd,)),
                   ("dec_pred.weight", (Dd, L)), ("dec_pred.bias", (L,))]
    return shapes


def param_count(cfg: ModelConfig, with_decoder: bool = True) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg, with_decoder))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ModelConfig, seed: int, with_decoder: bool = True) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg, with_decoder):
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name.endswith(".b") or name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            params[name] = trunc_normal(rng, shape)
    return params


def init_projector(teacher_dim: int, student_dim: int, seed: int,
                   identity: bool = False) -> dict[str, np.ndarray]:
    if identity:
        if teacher_dim != student_dim:
            raise ValueError("identity projector needs equal dims")
        weight = np.eye(teacher_dim)
    else:
        weight = trunc_normal(np.random.default_rng(seed), (teacher_dim, student_dim))
    return {"proj.weight": weight, "proj.bias": np.zeros(student_dim)}


def as_leaves(params: dict, requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


# -- patches and positions ---------------------------------------------------

def patchify(data: np.ndarray, p: int) -> np.ndarray:
    """(C,H,W) -> (N, p*p*C) or (B,C,H,W) -> (B, N, p*p*C); row-major patches.

    Within a patch the layout is (row, col, channel), channel fastest.
    """
    x = np.asarray(data, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    B, C, H, W = x.shape
    if H % p or W % p:
        raise ValueError(f"patch size {p} does not divide {H}x{W}")
    h, w = H // p, W // p
    out = x.reshape(B, C, h, p, w, p).transpose(0, 2, 4, 3, 5, 1).reshape(B, h * w, p * p * C)
    return out[0] if single else out


def unpatchify(tokens: np.ndarray, p: int, channels: int, height: int, width: int) -> np.ndarray:
    t = np.asarray(tokens)
    single = t.ndim == 2
    if single:
        t = t[None]
    h, w = height // p, width // p
    B = t.shape[0]
    out = t.reshape(B, h, w, p, p, channels).transpose(0, 5, 1, 3, 2, 4)
    out = out.reshape(B, channels, height, width)
    return out[0] if single else out


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    arg = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def sincos_pos_embed(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine-cosine table, (grid*grid, dim), rows in row-major patch order."""
    gy, gx = np.meshgrid(np.arange(grid, dtype=np.float64),
                         np.arange(grid, dtype=np.float64), indexing="ij")
    return np.concatenate([_sincos_1d(dim // 2, gy), _sincos_1d(dim // 2, gx)], axis=1)


# -- transformer pieces ------------------------------------------------------

def _linear(x: Tensor, P: dict, name: str) -> Tensor:
    return x @ P[f"{name}.weight"] + P[f"{name}.bias"]


def attention(x: Tensor, P: dict, prefix: str, heads: int) -> Tensor:
    B, T, D = x.shape
    dh = D // heads
    qkv = _linear(x, P, f"{prefix}.qkv").reshape(B, T, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = nx.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
    return _linear(out, P, f"{prefix}.proj")


def block(x: Tensor, P: dict, prefix: str, heads: int) -> Tensor:
    h = nx.layer_norm(x, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    x = x + attention(h, P, f"{prefix}.attn", heads)
    h = nx.layer_norm(x, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
    h = _linear(nx.gelu(_linear(h, P, f"{prefix}.mlp.fc1")), P, f"{prefix}.mlp.fc2")
    return x + h


def _gather_tokens(x: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    return x[np.arange(ids.shape[0])[:, None], ids]


class MaskedAutoencoder:
    """Encoder (+ optional decoder) over patch-vector token sequences."""

    def __init__(self, config: ModelConfig, params: dict | None = None, seed: int = 0,
                 with_decoder: bool = True):
        self.config = config
        self.with_decoder = with_decoder
        self.params = params if params is not None else init_params(config, seed, with_decoder)
        expected = dict(param_shapes(config, with_decoder))
        for name, shape in expected.items():
            if name not in self.params:
                raise ValueError(f"missing parameter {name}")
            if tuple(self.params[name].shape) != tuple(shape):
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, "
                                 f"expected {shape}")
        self.enc_pos = sincos_pos_embed(config.enc_dim, config.grid)
        self.dec_pos = sincos_pos_embed(config.dec_dim, config.grid)

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return as_leaves(self.params, requires_grad)

    def encode(self, tokens, visible_ids=None, P: dict | None = None, stop_at_tap: bool = False):
        """Returns (latents, tapped); tapped are pre-norm states after block ``tap_layer``.

        Positions are added before visible tokens are gathered, so the encoder
        is equivariant to the order of ``visible_ids``.
        """
        cfg = self.config
        P = P if P is not None else self.leaves(False)
        tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        if tokens.ndim != 3 or tokens.shape[1:] != (cfg.num_patches, cfg.patch_dim):
            raise ValueError(f"tokens {tokens.shape} do not match config "
                             f"(B, {cfg.num_patches}, {cfg.patch_dim})")
        x = _linear(tokens, P, "patch_embed") + self.enc_pos
        if visible_ids is not None:
            x = _gather_tokens(x, visible_ids)
        tapped = None
        for i in range(cfg.enc_layers):
            x = block(x, P, f"enc.{i}", cfg.enc_heads)
            if i + 1 == cfg.tap_layer:
                tapped = x
                if stop_at_tap:
                    return None, tapped
        latents = nx.layer_norm(x, P["enc_norm.g"], P["enc_norm.b"])
        return latents, tapped

    def assemble_decoder_input(self, latents: Tensor, ids_keep, ids_masked, P: dict) -> Tensor:
        """Embedded visible latents plus mask tokens, restored to patch order."""
        B, K, _ = latents.shape
        Dd = self.config.dec_dim
        ids_keep = np.asarray(ids_keep, dtype=np.int64).reshape(B, -1)
        ids_masked = np.asarray(ids_masked, dtype=np.int64).reshape(B, -1)
        if ids_keep.shape[1] != K:
            raise ValueError("ids_keep does not match the number of latents")
        if K + ids_masked.shape[1] != self.config.num_patches:
            raise ValueError("visible and masked ids do not cover the patch grid")
        y = _linear(latents, P, "dec_embed")
        M = ids_masked.shape[1]
        if M:
            mt = P["mask_token"].reshape(1, 1, Dd).broadcast_to((B, M, Dd))
            y = nx.concat([y, mt], axis=1)
        order = np.concatenate([ids_keep, ids_masked], axis=1)
        if not (np.sort(order, axis=1) == np.arange(self.config.num_patches)).all():
            raise ValueError("inconsistent mask: ids are not a permutation of the patch grid")
        restore = np.argsort(order, axis=1)
        return _gather_tokens(y, restore)

    def decode(self, latents: Tensor, ids_keep, ids_masked, P: dict | None = None) -> Tensor:
        if not self.with_decoder:
            raise ValueError("model was built without a decoder")
        cfg = self.config
        P = P if P is not None else self.leaves(False)
        x = self.assemble_decoder_input(latents, ids_keep, ids_masked, P) + self.dec_pos
        for i in range(cfg.dec_layers):
            x = block(x, P, f"dec.{i}", cfg.dec_heads)
        x = nx.layer_norm(x, P["dec_norm.g"], P["dec_norm.b"])
        return _linear(x, P, "dec_pred")


def split_ids(masks) -> tuple[np.ndarray, np.ndarray]:
    """Visible and masked patch ids per sample, from a list of PatchMask or bool rows."""
    rows = [np.asarray(getattr(m, "masked", m), dtype=bool) for m in masks]
    keep = np.stack([np.flatnonzero(~r) for r in rows])
    hide = np.stack([np.flatnonzero(r) for r in rows])
    return keep, hide


# -- teacher -----------------------------------------------------------------

def teacher_input(aligned: np.ndarray) -> np.ndarray:
    """Replicate a 6-band aligned batch (B,6,H,W) over three timestamp slots."""
    x = np.asarray(getattr(aligned, "data", aligned), dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1] != TEACHER_BANDS:
        raise ValueError(f"teacher expects {TEACHER_BANDS} aligned bands, got {x.shape[1]}")
    return np.concatenate([x] * TEACHER_TIMESTAMPS, axis=1)


def teacher_forward(teacher: MaskedAutoencoder, aligned) -> np.ndarray:
    """Tap-layer features (B, N, D_t) of the frozen teacher over all tokens."""
    cfg = teacher.config
    if cfg.in_channels != TEACHER_BANDS * TEACHER_TIMESTAMPS:
        raise ValueError("teacher config must take 18 input channels")
    tokens = patchify(teacher_input(aligned), cfg.patch_size)
    _, tapped = teacher.encode(tokens, None, teacher.leaves(False), stop_at_tap=True)
    return tapped.data.copy()


def surrogate_teacher(config: ModelConfig, seed: int = 42) -> MaskedAutoencoder:
    """Seeded random stand-in for pretrained teacher weights (encoder only)."""
    return MaskedAutoencoder(config, seed=seed, with_decoder=False)


def project(features, P: dict) -> Tensor:
    features = features if isinstance(features, Tensor) else Tensor(features)
    if features.shape[-1] != P["proj.weight"].shape[0]:
        raise ValueError(f"feature dim {features.shape[-1]} does not match projector "
                         f"input {P['proj.weight'].shape[0]}")
    return features @ P["proj.weight"] + P["proj.bias"]


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict
    meta: dict

    def subset(self, prefix: str = "", exclude: tuple = ()) -> dict:
        return {k: v for k, v in self.arrays.items()
                if k.startswith(prefix) and not k.startswith(exclude)}


def save_checkpoint(path, config: ModelConfig, arrays: dict, meta: dict | None = None) -> Path:
    """``HKD1`` + u64 header length + UTF-8 header + little-endian float64 arrays.

    Header sections: ``[config]`` key=value lines, ``[meta]`` key=value lines,
    ``[manifest]`` lines of ``name<TAB>d0,d1,...`` in payload order.
    """
    meta = meta or {}
    lines = ["[config]", config.to_text().rstrip("\n"), "[meta]"]
    for k, v in meta.items():
        if "\n" in str(v) or "=" in str(k):
            raise ValueError(f"meta entry {k!r} cannot be stored on one line")
        lines.append(f"{k}={v}")
    lines.append("[manifest]")
    for name, arr in arrays.items():
        lines.append(f"{name}\t{','.join(str(d) for d in np.shape(arr))}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = raw[12:12 + hlen].decode("utf-8")
    section, cfg_lines, meta, manifest = None, [], {}, []
    for line in header.splitlines():
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
        elif section == "config":
            cfg_lines.append(line)
        elif section == "meta" and line:
            k, _, v = line.partition("=")
            meta[k] = v
        elif section == "manifest" and line:
            name, _, dims = line.partition("\t")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            manifest.append((name, shape))
    config = ModelConfig.from_text("\n".join(cfg_lines))
    arrays, offset = {}, 12 + hlen
    for name, shape in manifest:
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated payload at {name}")
        arrays[name] = np.frombuffer(raw, "<f8", int(np.prod(shape)), offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return Checkpoint(config, arrays, meta)


def load_teacher_weights(path, expected: ModelConfig | None = None) -> MaskedAutoencoder:
    """Frozen teacher from an externally supplied checkpoint file (none ship)."""
    ckpt = load_checkpoint(path)
    if expected is not None and ckpt.config != expected:
        raise ValueError(f"{path}: teacher config differs from the expected one")
    names = {n for n, _ in param_shapes(ckpt.config, with_decoder=False)}
    return MaskedAutoencoder(ckpt.config, {k: v for k, v in ckpt.arrays.items() if k in names},
                             with_decoder=False)
