"""Distillation pretraining: masking curriculum, teacher/student passes, Adam."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import banddef
from .datastore import BandStats, TileStore, compute_stats
from .numerics import Tensor
from .objective import (LossBreakdown, LossWeights, huber_loss, kd_loss, mse_loss,
                        patch_ssim_loss, per_channel_psnr, per_channel_ssim, psnr,
                        ssim_metric, to_reflectance, total_loss)
from .saliency import METHODS, MODES, build_mask, mask_schedule, num_masked, score_patches
from .vitmae import (MaskedAutoencoder, ModelConfig, init_projector, load_checkpoint,
                     load_teacher_weights, patchify, project, save_checkpoint, split_ids,
                     surrogate_teacher, teacher_forward, unpatchify)

log = logging.getLogger(__name__)

MIN_LR_FRACTION = 0.01
# mask-seed salts outside the range of training step indices
SALT_EVAL = 2**40
SALT_FEATURES = 2**40 + 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    accum_steps: int = 1
    base_lr: float = 1e-4
    warmup_epochs: int = 2
    mask_ratio: float = 0.75
    mask_method: str = "gabor"
    salient_mode: str = "salient_masked"
    random_switch_epoch: int | None = None
    lambda1: float = 1.0
    lambda2: float = 0.5
    alpha: float = 1.0
    beta: float = 0.5
    temperature: float = 1.0
    recon: str = "mse_ssim"
    huber_delta: float = 1.0
    region: str = "masked_only"
    tap_layer: int = 3
    kd_function: str = "kld"
    seed: int = 0
    # student architecture
    patch_size: int = 8
    enc_dim: int = 64
    enc_layers: int = 4
    enc_heads: int = 4
    enc_mlp_dim: int = 128
    dec_dim: int = 64
    dec_layers: int = 2
    dec_heads: int = 4
    dec_mlp_dim: int = 128
    # frozen teacher
    teacher_dim: int = 24
    teacher_layers: int = 4
    teacher_heads: int = 4
    teacher_mlp_dim: int = 48
    teacher_tap_layer: int = 3
    teacher_seed: int = 42
    teacher_weights: str = ""
    # spectral alignment
    target_bands: str = "auto"
    overlap_mode: str = "contained"
    # bookkeeping
    eval_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.accum_steps < 1:
            raise ValueError("batch_size and accum_steps must be >= 1")
        if self.batch_size % self.accum_steps:
            raise ValueError("accum_steps must divide batch_size")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be below epochs")
        if self.mask_method not in METHODS:
            raise ValueError(f"mask_method must be one of {METHODS}")
        if self.salient_mode not in MODES[:2]:
            raise ValueError(f"salient_mode must be one of {MODES[:2]}")
        if self.recon not in ("mse_ssim", "huber"):
            raise ValueError("recon must be mse_ssim or huber")
        if self.kd_function not in ("kld", "l1", "js"):
            raise ValueError("kd_function must be kld, l1 or js")
        self.weights  # validates signs

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.alpha, self.beta, self.temperature)

    def student_config(self, in_channels: int, image_size: int) -> ModelConfig:
        return ModelConfig(in_channels, image_size, self.patch_size, self.enc_dim,
                           self.enc_layers, self.enc_heads, self.enc_mlp_dim, self.dec_dim,
                           self.dec_layers, self.dec_heads, self.dec_mlp_dim, self.tap_layer)

    def teacher_config(self, image_size: int) -> ModelConfig:
        return ModelConfig(18, image_size, self.patch_size, self.teacher_dim,
                           self.teacher_layers, self.teacher_heads, self.teacher_mlp_dim,
                           self.teacher_dim, 1, self.teacher_heads, self.teacher_mlp_dim,
                           self.teacher_tap_layer)

    def to_text(self) -> str:
        out = []
        for k, v in asdict(self).items():
            out.append(f"{k}={'none' if v is None else v}")
        return "\n".join(out) + "\n"


# Named configurations, as overrides of the defaults.
PRESETS = {
    "student": dict(beta=0.0, mask_method="random", random_switch_epoch=None,
                    recon="huber", lambda2=0.0, kd_function="l1"),
    "base_kd": dict(mask_method="random", random_switch_epoch=0, recon="huber",
                    lambda2=0.0, kd_function="l1"),
    "hyperkd_wavelet_visible": dict(mask_method="wavelet", salient_mode="salient_visible",
                                    random_switch_epoch=None, recon="mse_ssim",
                                    kd_function="kld"),
    "hyperkd_wavelet": dict(mask_method="wavelet", salient_mode="salient_masked",
                            random_switch_epoch=100, recon="mse_ssim", kd_function="kld"),
    "hyperkd_gabor": dict(mask_method="gabor", salient_mode="salient_masked",
                          random_switch_epoch=100, recon="mse_ssim", kd_function="kld"),
}


def _convert(name: str, raw: str):
    f = {f.name: f for f in fields(TrainConfig)}[name]
    text = raw.strip()
    kind = str(f.type)
    if "None" in kind and text.lower() in ("none", ""):
        return None
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return float(text)
    return text


def parse_overrides(pairs) -> dict:
    """``key=value`` strings (or lines) -> typed dict; unknown keys are rejected."""
    known = {f.name for f in fields(TrainConfig)}
    out = {}
    for item in pairs:
        line = item.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"expected key=value, got {line!r}")
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        try:
            out[key] = _convert(key, value)
        except ValueError as exc:
            raise ValueError(f"bad value for {key!r}: {value.strip()!r}") from exc
    return out


def load_config(path=None, preset: str | None = None, overrides=()) -> TrainConfig:
    """Defaults <- preset <- config file <- overrides."""
    values = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    if path is not None:
        values.update(parse_overrides(Path(path).read_text(encoding="utf-8").splitlines()))
    values.update(parse_overrides(overrides))
    return TrainConfig(**values)


# -- schedule and optimizer --------------------------------------------------

def lr_schedule(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0, then cosine decay reaching 1% of base at the last step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / span)
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return base_lr * (MIN_LR_FRACTION + (1.0 - MIN_LR_FRACTION) * cosine)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_update(params: dict, grads: dict, state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step; returns new (params, state)."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        g = np.zeros_like(p) if g is None else g
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {k}")
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


# -- run log -----------------------------------------------------------------

@dataclass
class RunLog:
    config_text: str
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    wall_clock: float = 0.0

    STEP_COLUMNS = ("step", "l_mse", "l_ssim", "l_kd", "l_total", "lr")

    def add_step(self, step: int, br: LossBreakdown, lr: float, epoch: int, mode: str):
        self.steps.append(dict(step=step, l_mse=br.l_mse, l_ssim=br.l_ssim, l_kd=br.l_kd,
                               l_total=br.l_total, l_recon=br.l_recon, lr=lr, epoch=epoch,
                               mask_mode=mode))

    def column(self, name: str) -> np.ndarray:
        return np.array([s[name] for s in self.steps])

    def steps_csv(self) -> str:
        lines = [",".join(self.STEP_COLUMNS)]
        for s in self.steps:
            lines.append(",".join(repr(s[c]) if c != "step" else str(s[c])
                                  for c in self.STEP_COLUMNS))
        return "\n".join(lines) + "\n"

    def epochs_csv(self) -> str:
        lines = ["epoch,mask_mode,psnr,ssim"]
        for e in self.epochs:
            metrics = [repr(float(e[k])) if k in e else "" for k in ("psnr", "ssim")]
            lines.append(f"{e['epoch']},{e['mask_mode']},{','.join(metrics)}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "runlog.csv").write_text(self.steps_csv(), encoding="utf-8")
        (d / "epochs.csv").write_text(self.epochs_csv(), encoding="utf-8")
        (d / "config.txt").write_text(self.config_text, encoding="utf-8")


# -- data preparation --------------------------------------------------------

def target_table(spec: str, source: banddef.BandTable, overlap_mode: str = "contained"):
    if spec == "hls":
        return banddef.hls_table()
    if spec == "span":
        return banddef.spanning_target_table(source, 6)
    if spec == "auto":
        try:
            banddef.build_alignment(source, banddef.hls_table(), overlap_mode)
            return banddef.hls_table()
        except banddef.EmptySubset:
            return banddef.spanning_target_table(source, 6)
    return banddef.load_band_table(spec)


@dataclass
class PreparedSplit:
    ids: list
    cubes: np.ndarray        # (n, C, H, W) normalized
    tokens: np.ndarray       # (n, N, L)
    scores: dict             # method -> (n, N)


def prepare_split(tiles, stats: BandStats, p: int, methods=(), threads: int = 1):
    ids = [t.tile_id for t in tiles]
    cubes = np.stack([(t.data - stats.mean[:, None, None]) / stats.std[:, None, None]
                      for t in tiles])
    scores = {m: np.stack([score_patches(c, m, p, threads=threads).scores for c in cubes])
              for m in methods}
    return PreparedSplit(ids, cubes, patchify(cubes, p), scores)


def _sample_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(x) for x in parts]).generate_state(1)[0])


class Pretrainer:
    """Owns the student, projector, optimizer state and the frozen teacher."""

    def __init__(self, config: TrainConfig, store: TileStore, threads: int = 1,
                 stats: BandStats | None = None):
        self.config = config
        self.threads = threads
        train = store.split("train")
        if not train:
            raise ValueError("store has no training tiles")
        self.stats = stats or store.stats or compute_stats(store.tiles)
        C, H, W = train[0].data.shape
        if H != W:
            raise ValueError("tiles must be square")
        self.channels = C
        self.student_cfg = config.student_config(C, H)
        self.teacher_cfg = config.teacher_config(H)
        n_patches = self.student_cfg.num_patches
        if num_masked(config.mask_ratio, n_patches) >= n_patches:
            raise ValueError("mask_ratio hides every patch; nothing left for the encoder")

        self.alignment = banddef.build_alignment(
            store.band_table, target_table(config.target_bands, store.band_table,
                                           config.overlap_mode), config.overlap_mode)
        self.align_matrix = banddef.alignment_matrix(store.band_table, self.alignment)
        methods = () if config.mask_method == "random" else (config.mask_method,)
        p = config.patch_size
        self.train = prepare_split(train, self.stats, p, methods, threads)
        self.eval = prepare_split(store.split("eval"), self.stats, p, methods, threads) \
            if store.split("eval") else None

        if config.teacher_weights:
            self.teacher = load_teacher_weights(config.teacher_weights)
            self.teacher_cfg = self.teacher.config
        else:
            self.teacher = surrogate_teacher(self.teacher_cfg, config.teacher_seed)
        self.teacher_feats = self._teacher_features(self.train.cubes)

        self.student = MaskedAutoencoder(self.student_cfg, seed=config.seed)
        self.params = dict(self.student.params)
        self.params.update(init_projector(self.teacher_cfg.enc_dim, self.student_cfg.enc_dim,
                                          config.seed + 1))
        self.adam = AdamState.zeros(self.params)
        self.step = 0
        self.log = RunLog(config.to_text())
        self._t0 = time.perf_counter()

    # -- bookkeeping --

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train.ids) / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.steps_per_epoch

    def lr(self, step: int) -> float:
        c = self.config
        return lr_schedule(step, c.base_lr, c.warmup_epochs * self.steps_per_epoch,
                           self.total_steps)

    def mask_mode(self, epoch: int) -> str:
        c = self.config
        if c.mask_method == "random":
            return "random"
        return mask_schedule(epoch, c.salient_mode, c.random_switch_epoch)

    def batch_indices(self, step: int) -> np.ndarray:
        spe = self.steps_per_epoch
        epoch, k = divmod(step, spe)
        perm = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.train.ids))
        bs = self.config.batch_size
        return perm[k * bs:(k + 1) * bs]

    def _teacher_features(self, cubes: np.ndarray) -> np.ndarray:
        aligned = np.einsum("tc,nchw->nthw", self.align_matrix, cubes)
        return teacher_forward(self.teacher, aligned)

    def masks_for(self, split: PreparedSplit, idx, mode: str, salt: int):
        n = self.student_cfg.num_patches
        out = []
        for i in idx:
            if mode == "random":
                scores = np.zeros(n)
            else:
                scores = split.scores[self.config.mask_method][i]
            out.append(build_mask(scores, self.config.mask_ratio, mode,
                                  _sample_seed(self.config.seed, salt, i)))
        return out

    # -- loss --

    def loss(self, P: dict, idx, masks, teacher_feats: np.ndarray | None = None,
             split: PreparedSplit | None = None):
        """Reconstruction + distillation loss for samples ``idx`` -> (Tensor, breakdown)."""
        c = self.config
        split = split or self.train
        teacher_feats = self.teacher_feats if teacher_feats is None else teacher_feats
        tokens = split.tokens[idx]
        keep, hide = split_ids(masks)
        masked = np.stack([m.masked for m in masks])
        latents, tapped = self.student.encode(tokens, keep, P)
        t_vis = np.take_along_axis(teacher_feats[idx], keep[:, :, None], axis=1)
        l_kd = kd_loss(c.kd_function, project(t_vis, P), tapped, c.temperature)
        if c.beta == 0.0:
            l_kd = l_kd.detach()
        pred = self.student.decode(latents, keep, hide, P)
        if c.recon == "huber":
            l_pix = huber_loss(tokens, pred, masked, c.region, c.huber_delta)
        else:
            l_pix = mse_loss(tokens, pred, masked, c.region)
        l_ssim = patch_ssim_loss(tokens, pred, masked, self.channels, self.stats.mean,
                                 self.stats.std, c.region)
        return total_loss(l_pix, l_ssim, l_kd, c.weights)

    def gradients(self, idx, masks):
        """Loss breakdown and parameter gradients, accumulated over micro-batches."""
        c = self.config
        micro = np.array_split(np.arange(len(idx)), min(c.accum_steps, len(idx)))
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        parts = []
        for chunk in micro:
            P = {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}
            total, br = self.loss(P, idx[chunk], [masks[i] for i in chunk])
            w = len(chunk) / len(idx)
            (total * w).backward()
            for k, t in P.items():
                if t.grad is not None:
                    grads[k] += t.grad
            parts.append((w, br))
        if len(parts) == 1:
            return parts[0][1], grads
        avg = {f: sum(w * getattr(b, f) for w, b in parts) for f in
               ("l_mse", "l_ssim", "l_kd")}
        wt = c.weights
        recon = wt.lambda1 * avg["l_mse"] + wt.lambda2 * avg["l_ssim"]
        br = LossBreakdown(avg["l_mse"], avg["l_ssim"], recon, avg["l_kd"],
                           wt.alpha * recon + wt.beta * avg["l_kd"])
        return br, grads

    def distill_step(self) -> LossBreakdown:
        step = self.step
        epoch = step // self.steps_per_epoch
        mode = self.mask_mode(epoch)
        idx = self.batch_indices(step)
        masks = self.masks_for(self.train, idx, mode, step)
        try:
            br, grads = self.gradients(idx, masks)
        except (ValueError, FloatingPointError) as exc:
            raise RuntimeError(f"distill step {step} failed: {exc}") from exc
        lr = self.lr(step)
        self.params, self.adam = adam_update(self.params, grads, self.adam, lr)
        self.log.add_step(step, br, lr, epoch, mode)
        self.step += 1
        return br

    # -- evaluation --

    def reconstruct(self, split: PreparedSplit, mode: str, salt: int = SALT_EVAL):
        """Decoder output for every tile of ``split`` as (n, C, H, W) normalized cubes."""
        idx = np.arange(len(split.ids))
        masks = self.masks_for(split, idx, mode, salt)
        keep, hide = split_ids(masks)
        P = {k: Tensor(v) for k, v in self.params.items()}
        latents, _ = self.student.encode(split.tokens, keep, P)
        pred = self.student.decode(latents, keep, hide, P).data
        _, C, H, W = split.cubes.shape
        return unpatchify(pred, self.config.patch_size, C, H, W)

    def evaluate(self, split: PreparedSplit | None = None, mode: str | None = None) -> dict:
        split = split or self.eval or self.train
        epoch = max(self.step - 1, 0) // self.steps_per_epoch
        mode = mode or self.mask_mode(epoch)
        recon = self.reconstruct(split, mode)
        out = dict(ids=split.ids, psnr=[], ssim=[], channel_psnr=[], channel_ssim=[], mode=mode)
        for truth, pred in zip(split.cubes, recon):
            t = to_reflectance(truth, self.stats.mean, self.stats.std)
            r = to_reflectance(pred, self.stats.mean, self.stats.std)
            out["psnr"].append(psnr(t, r))
            out["ssim"].append(ssim_metric(t, r))
            out["channel_psnr"].append(per_channel_psnr(t, r))
            out["channel_ssim"].append(per_channel_ssim(t, r))
        for key in ("psnr", "ssim", "channel_psnr", "channel_ssim"):
            out[key] = np.array(out[key])
        return out

    def feature_distance(self, split: PreparedSplit | None = None, mode: str | None = None) -> float:
        """Mean L2 distance between projected teacher and student tap features (visible tokens)."""
        split = split or self.train
        feats = self.teacher_feats if split is self.train else self._teacher_features(split.cubes)
        idx = np.arange(len(split.ids))
        mode = mode or self.mask_mode(max(self.step - 1, 0) // self.steps_per_epoch)
        masks = self.masks_for(split, idx, mode, SALT_FEATURES)
        keep, _ = split_ids(masks)
        P = {k: Tensor(v) for k, v in self.params.items()}
        _, tapped = self.student.encode(split.tokens, keep, P)
        t_vis = np.take_along_axis(feats, keep[:, :, None], axis=1)
        diff = project(t_vis, P).data - tapped.data
        return float(np.linalg.norm(diff, axis=-1).mean())

    # -- driver --

    def run(self, num_steps: int | None = None, checkpoint_dir=None) -> RunLog:
        end = self.total_steps if num_steps is None else min(self.total_steps,
                                                             self.step + num_steps)
        spe = self.steps_per_epoch
        while self.step < end:
            self.distill_step()
            if self.step % spe == 0:
                epoch = self.step // spe - 1
                record = dict(epoch=epoch, mask_mode=self.mask_mode(epoch))
                c = self.config
                if c.eval_every and (epoch + 1) % c.eval_every == 0 and self.eval is not None:
                    ev = self.evaluate(mode=record["mask_mode"])
                    record.update(psnr=float(ev["psnr"].mean()), ssim=float(ev["ssim"].mean()))
                self.log.epochs.append(record)
                if checkpoint_dir and c.checkpoint_every and (epoch + 1) % c.checkpoint_every == 0:
                    self.save(Path(checkpoint_dir) / f"checkpoint_e{epoch + 1:04d}.hkd")
        self.log.wall_clock = time.perf_counter() - self._t0
        return self.log

    def trained_student(self) -> MaskedAutoencoder:
        """The student with its current weights; ``self.student`` keeps the init."""
        return MaskedAutoencoder(self.student_cfg,
                                 {k: self.params[k].copy() for k in self.student.params})

    # -- checkpoints --

    def save(self, path) -> Path:
        arrays = dict(self.params)
        arrays.update({f"adam.m.{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"adam.v.{k}": v for k, v in self.adam.v.items()})
        meta = {"step": self.step, "adam_t": self.adam.t}
        for line in self.config.to_text().splitlines():
            k, _, v = line.partition("=")
            meta[f"train.{k}"] = v
        return save_checkpoint(path, self.student_cfg, arrays, meta)

    @classmethod
    def resume(cls, path, store: TileStore, threads: int = 1) -> "Pretrainer":
        ckpt = load_checkpoint(path)
        pairs = [f"{k[6:]}={v}" for k, v in ckpt.meta.items() if k.startswith("train.")]
        config = TrainConfig(**parse_overrides(pairs))
        trainer = cls(config, store, threads)
        if ckpt.config != trainer.student_cfg:
            raise ValueError(f"{path}: checkpoint architecture does not match the store")
        names = list(trainer.params)
        trainer.params = {k: ckpt.arrays[k] for k in names}
        trainer.adam = AdamState({k: ckpt.arrays[f"adam.m.{k}"] for k in names},
                                 {k: ckpt.arrays[f"adam.v.{k}"] for k in names},
                                 int(ckpt.meta["adam_t"]))
        trainer.step = int(ckpt.meta["step"])
        return trainer


def run_pretraining(config: TrainConfig, store: TileStore, out_dir=None, threads: int = 1,
                    resume=None, num_steps: int | None = None):
    """Train, write run log and final checkpoint into ``out_dir``; returns (trainer, log)."""
    trainer = Pretrainer.resume(resume, store, threads) if resume else \
        Pretrainer(config, store, threads)
    runlog = trainer.run(num_steps, checkpoint_dir=out_dir)
    if out_dir is not None:
        out = Path(out_dir)
        runlog.write(out)
        trainer.save(out / "checkpoint.hkd")
    return trainer, runlog
