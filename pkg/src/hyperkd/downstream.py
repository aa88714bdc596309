"""Frozen-encoder transfer: small convolutional heads for per-pixel tasks."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .datastore import BandStats, HyperCube, normalize
from .numerics import Tensor
from .trainer import AdamState, adam_update
from .vitmae import Checkpoint, MaskedAutoencoder, load_checkpoint, param_shapes, patchify

TASKS = ("classification", "regression")


@dataclass(frozen=True)
class HeadConfig:
    task: str = "classification"
    num_classes: int = 4
    widths: tuple = (32, 32)
    upsample: int | None = None     # None: the encoder patch size

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.task == "classification" and self.num_classes < 2:
            raise ValueError("classification needs num_classes >= 2")
        if len(self.widths) != 2 or min(self.widths) < 1:
            raise ValueError("widths must hold two positive conv widths")

    @property
    def out_channels(self) -> int:
        return self.num_classes if self.task == "classification" else 1


@dataclass
class ClassificationResult:
    top1: float
    per_class_top1: np.ndarray      # nan where the class is absent from the labels
    iou: np.ndarray                 # nan where the class is absent from the labels
    miou: float
    confusion: np.ndarray           # [truth, prediction] counts


def encoder_hash(params: dict) -> str:
    """SHA-256 over parameter names, shapes and float64 bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


def head_shapes(in_dim: int, cfg: HeadConfig) -> list[tuple[str, tuple]]:
    w1, w2 = cfg.widths
    return [("head.conv1.weight", (w1, in_dim, 3, 3)), ("head.conv1.bias", (w1,)),
            ("head.conv2.weight", (w2, w1, 3, 3)), ("head.conv2.bias", (w2,)),
            ("head.out.weight", (cfg.out_channels, w2, 1, 1)),
            ("head.out.bias", (cfg.out_channels,))]


def init_head(in_dim: int, cfg: HeadConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """He-normal conv weights, zero biases."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in head_shapes(in_dim, cfg):
        if name.endswith("bias"):
            out[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            out[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    return out


class DownstreamModel:
    """Frozen encoder + trainable conv head on the patch-grid feature map."""

    def __init__(self, encoder: MaskedAutoencoder, head_config: HeadConfig,
                 head_params: dict | None = None, stats: BandStats | None = None, seed: int = 0):
        self.encoder = encoder
        self.head_config = head_config
        self.stats = stats
        self.target_stats: tuple[float, float] | None = None
        d = encoder.config.enc_dim
        self.head_params = head_params if head_params is not None else init_head(d, head_config, seed)
        self.upsample = head_config.upsample or encoder.config.patch_size

    @property
    def encoder_params(self) -> dict:
        return self.encoder.params

    def _arrays(self, tiles) -> np.ndarray:
        """(B, C, H, W) normalized data from HyperCubes or a pre-normalized array."""
        if isinstance(tiles, np.ndarray):
            return tiles[None] if tiles.ndim == 3 else tiles
        out = []
        for t in tiles:
            if isinstance(t, HyperCube):
                if not t.normalized:
                    if self.stats is None:
                        raise ValueError("raw tiles need band stats to normalize")
                    t = normalize(t, self.stats)
                out.append(t.data)
            else:
                out.append(np.asarray(t, dtype=np.float64))
        return np.stack(out)

    def features(self, tiles) -> np.ndarray:
        """All-token (r = 0) encoder latents as (B, enc_dim, H/p, W/p)."""
        cfg = self.encoder.config
        x = self._arrays(tiles)
        if x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ValueError(f"tiles {x.shape[1:]} incompatible with encoder input "
                             f"({cfg.in_channels}, {cfg.image_size}, {cfg.image_size})")
        tokens = patchify(x, cfg.patch_size)
        latents, _ = self.encoder.encode(tokens)
        g = cfg.grid
        return latents.data.reshape(len(x), g, g, cfg.enc_dim).transpose(0, 3, 1, 2).copy()

    def head(self, feats, P: dict | None = None) -> Tensor:
        """(B, D, h, w) features -> (B, out_channels, h*f, w*f) pixel outputs."""
        P = P if P is not None else {k: Tensor(v) for k, v in self.head_params.items()}
        x = nx.relu(nx.conv2d(feats, P["head.conv1.weight"], "zero", P["head.conv1.bias"]))
        x = nx.relu(nx.conv2d(x, P["head.conv2.weight"], "zero", P["head.conv2.bias"]))
        x = nx.conv2d(x, P["head.out.weight"], "zero", P["head.out.bias"])
        return nx.upsample_nearest(x, self.upsample)

    def forward(self, tiles) -> np.ndarray:
        return self.head(self.features(tiles)).data

    def predict(self, tiles) -> np.ndarray:
        """Class map (B, H, W), or normalized regression output (B, 1, H, W)."""
        out = self.forward(tiles)
        if self.head_config.task == "classification":
            return out.argmax(axis=1)
        return out


def attach_head(checkpoint, head_config: HeadConfig, stats: BandStats | None = None,
                seed: int = 0) -> DownstreamModel:
    """Wrap the encoder of ``checkpoint`` (path, Checkpoint or model) with a fresh head."""
    if isinstance(checkpoint, MaskedAutoencoder):
        cfg, arrays = checkpoint.config, checkpoint.params
    else:
        ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
        cfg, arrays = ckpt.config, ckpt.arrays
    names = [n for n, _ in param_shapes(cfg, with_decoder=False)]
    missing = [n for n in names if n not in arrays]
    if missing:
        raise ValueError(f"checkpoint lacks encoder parameter {missing[0]}")
    params = {n: np.array(arrays[n], dtype=np.float64) for n in names}
    encoder = MaskedAutoencoder(cfg, params, with_decoder=False)
    return DownstreamModel(encoder, head_config, stats=stats, seed=seed)


# -- training ----------------------------------------------------------------

def _task_loss(model: DownstreamModel, out: Tensor, y: np.ndarray) -> Tensor:
    if model.head_config.task == "classification":
        logp = nx.log_softmax(out, axis=1)
        B, _, H, W = out.shape
        b, h, w = np.meshgrid(np.arange(B), np.arange(H), np.arange(W), indexing="ij")
        return -logp[b, y, h, w].mean()
    d = out - y[:, None]
    return (d * d).mean()


def normalize_targets(model: DownstreamModel, targets) -> np.ndarray:
    if model.target_stats is None:
        raise ValueError("target statistics are not set; train the head first")
    mean, std = model.target_stats
    return (np.asarray(targets, dtype=np.float64) - mean) / std


def train_head(model: DownstreamModel, tiles, targets, steps: int = 100, lr: float = 3e-3,
               batch_size: int = 16, seed: int = 0) -> list[float]:
    """Adam on the head only; the encoder features are computed once and reused.

    ``targets`` are (B, H, W) class ids or raw regression values; regression
    targets are normalized with statistics of these training targets.
    """
    feats = model.features(tiles)
    y = np.asarray(targets)
    if y.shape != (feats.shape[0],) + (feats.shape[2] * model.upsample,) * 2:
        raise ValueError(f"targets {y.shape} do not match tiles")
    if model.head_config.task == "classification":
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= model.head_config.num_classes:
            raise ValueError("labels outside [0, num_classes)")
    else:
        model.target_stats = (float(y.mean()), float(max(y.std(), 1e-8)))
        y = normalize_targets(model, y)
    rng = np.random.default_rng(seed)
    state = AdamState.zeros(model.head_params)
    losses = []
    n = len(feats)
    for _ in range(steps):
        idx = rng.permutation(n)[:min(batch_size, n)]
        P = {k: Tensor(v, requires_grad=True) for k, v in model.head_params.items()}
        loss = _task_loss(model, model.head(feats[idx], P), y[idx])
        loss.backward()
        grads = {k: t.grad for k, t in P.items()}
        model.head_params, state = adam_update(model.head_params, grads, state, lr)
        losses.append(loss.item())
    return losses


# -- evaluation --------------------------------------------------------------

def confusion_matrix(pred, truth, num_classes: int) -> np.ndarray:
    pred, truth = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError("prediction and label shapes differ")
    for name, v in (("labels", truth), ("predictions", pred)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"{name} outside [0, {num_classes})")
    flat = truth.astype(np.int64) * num_classes + pred.astype(np.int64)
    return np.bincount(flat, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def classification_metrics(pred, truth, num_classes: int) -> ClassificationResult:
    """Pixel top-1, per-class top-1 and IoU; mIoU over classes present in ``truth``."""
    cm = confusion_matrix(pred, truth, num_classes)
    total = cm.sum()
    if total == 0:
        raise ValueError("no pixels to evaluate")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    present = support > 0
    per_class = np.full(num_classes, np.nan)
    per_class[present] = tp[present] / support[present]
    iou = np.full(num_classes, np.nan)
    union = support + predicted - tp
    iou[present] = tp[present] / union[present]
    return ClassificationResult(float(tp.sum() / total), per_class, iou,
                                float(iou[present].mean()), cm)


def eval_classification(model: DownstreamModel, tiles, labels) -> ClassificationResult:
    pred = model.predict(tiles)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise ValueError(f"labels {labels.shape} do not match predictions {pred.shape}")
    return classification_metrics(pred, labels, model.head_config.num_classes)


def mae(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.abs(pred - target).mean())


def eval_regression(model: DownstreamModel, tiles, targets) -> float:
    """MAE in normalized target units."""
    pred = model.predict(tiles)[:, 0]
    return mae(pred, normalize_targets(model, targets))


def write_classification_csv(path, result: ClassificationResult) -> None:
    lines = ["class,top1,iou"]
    for c, (t, i) in enumerate(zip(result.per_class_top1, result.iou)):
        lines.append(f"{c},{float(t)!r},{float(i)!r}")
    lines.append(f"all,{float(result.top1)!r},{float(result.miou)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_regression_csv(path, value: float) -> None:
    Path(path).write_text(f"mae\n{float(value)!r}\n", encoding="utf-8")
