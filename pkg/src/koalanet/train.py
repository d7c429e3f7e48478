"""Three-stage training: downsampler, Baseline upsampler, then joint KOALAnet.

Every batch is a pure function of ``(seed, stage, iteration)``, so a run
resumed from a checkpoint replays exactly what an uninterrupted run would
have done.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import formats, ops
from .degrade import build_kd, degrade_image, sample_spec
from .downsampler import (Downsampler, DownsamplerConfig, build_downsampler, downsampler_loss,
                          reconstruct_lr)
from .imageio import read_png, to_unit
from .tensor import Tape, Tensor
from .upsampler import Upsampler, UpsamplerConfig, build_upsampler, upgrade_to_koala

log = logging.getLogger(__name__)

LOG_FIELDS = ["iter", "lr", "loss", "loss_lr_recon", "loss_kernel", "loss_sr", "wall_time"]


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, terms: dict):
        self.iteration = iteration
        self.terms = terms
        detail = ", ".join(f"{k}={v}" for k, v in terms.items())
        super().__init__(f"non-finite loss at iteration {iteration}: {detail}")


@dataclass
class TrainConfig:
    stage: int = 1
    total_iters: int = 2000
    lr: float = 1e-4
    lr_decay_points: tuple = (0.8, 0.9)
    batch_size: int = 8
    patch_size: int = 64
    scale: int = 4
    seed: int = 0
    hr_dir: str = ""
    out_dir: str = "runs"
    channels: int = 32
    down_channels: int = 32
    unet_levels: int = 3
    resblocks_per_level: int = 2
    n_koala: int = 5
    n_res: int = 7
    padding: str = "replicate"
    stage3_kernel_term: bool = False
    log_every: int = 1
    ckpt_every: int = 500
    stop_at: int = 0  # 0: run to total_iters

    def validate(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.scale not in (2, 4):
            raise ValueError(f"unsupported scale {self.scale}")
        if self.total_iters < 1 or self.batch_size < 1 or self.patch_size < 1:
            raise ValueError("total_iters, batch_size and patch_size must be positive")
        if self.patch_size % 2 ** (self.unet_levels - 1):
            raise ValueError(f"patch_size must divide by {2 ** (self.unet_levels - 1)}")
        if self.padding not in ("replicate", "zero"):
            raise ValueError(f"unknown padding {self.padding!r}")

    @property
    def down_config(self) -> DownsamplerConfig:
        return DownsamplerConfig(self.down_channels, self.unet_levels, self.resblocks_per_level)

    def up_config(self, use_koala: bool) -> UpsamplerConfig:
        return UpsamplerConfig(self.scale, self.channels, self.n_koala, self.n_res, use_koala)

    def log_path(self) -> Path:
        return Path(self.out_dir) / f"stage{self.stage}_log.csv"

    def ckpt_path(self) -> Path:
        return Path(self.out_dir) / f"stage{self.stage}.ckpt"


# ---------------------------------------------------------------------------
# config files: flat ``key = value`` lines, '#' starts a comment


def _coerce(raw: str, typ, key: str):
    raw = raw.strip()
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {raw!r}")
    if typ in (tuple, "tuple"):
        return tuple(float(p) for p in raw.replace(",", " ").split())
    return raw


def parse_config(text: str) -> dict:
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, types[key], key)
    return out


def load_config(path, **overrides) -> TrainConfig:
    values = parse_config(Path(path).read_text(encoding="utf-8"))
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Piecewise constant: x0.1 from the first decay point, x0.01 from the second."""
    lr = cfg.lr
    for frac in cfg.lr_decay_points:
        if iteration >= int(round(frac * cfg.total_iters)):
            lr *= 0.1
    return lr


# ---------------------------------------------------------------------------
# data


class HRPool:
    def __init__(self, images: Sequence[np.ndarray], names: Optional[Sequence[str]] = None):
        if not images:
            raise ValueError("empty HR pool")
        self.images = [np.asarray(im, dtype=np.uint8) for im in images]
        self.names = list(names) if names is not None else [f"{i:04d}" for i in range(len(images))]

    @classmethod
    def from_dir(cls, path) -> "HRPool":
        files = sorted(Path(path).glob("*.png"))
        if not files:
            raise FileNotFoundError(f"no PNG images in {path}")
        return cls([read_png(f) for f in files], [f.name for f in files])

    def __len__(self) -> int:
        return len(self.images)

    @property
    def min_side(self) -> int:
        return min(min(im.shape[:2]) for im in self.images)


class Batch(NamedTuple):
    Y: np.ndarray   # (B, 3, s*P, s*P) float32 in [-1, 1]
    X: np.ndarray   # (B, 3, P, P) float32
    k_d: np.ndarray  # (B, 20, 20) float64
    specs: list


def batch_rng(cfg: TrainConfig, iteration: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, cfg.stage, iteration])


def sample_batch(pool: HRPool, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    s, P = cfg.scale, cfg.patch_size
    hp = s * P
    if hp > pool.min_side:
        raise ValueError(f"HR crop {hp} larger than the smallest pool image ({pool.min_side})")
    Ys, Xs, ks, specs = [], [], [], []
    for _ in range(cfg.batch_size):
        img = pool.images[rng.integers(len(pool))]
        top = rng.integers(img.shape[0] - hp + 1)
        left = rng.integers(img.shape[1] - hp + 1)
        y = to_unit(img[top:top + hp, left:left + hp])
        spec = sample_spec(int(rng.integers(2 ** 63)))
        kd = build_kd(spec, s).values
        Ys.append(y)
        Xs.append(degrade_image(y, kd, s, cfg.padding).astype(np.float32))
        ks.append(kd)
        specs.append(spec)
    return Batch(np.stack(Ys), np.stack(Xs), np.stack(ks), specs)


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with (0.9, 0.999), eps 1e-8, no weight decay; state kept in fp32."""

    def __init__(self, params: "dict[str, Tensor]", beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            dt = p.data.dtype
            m, v = self.m[n], self.v[n]
            m *= dt.type(b1)
            m += dt.type(1 - b1) * g
            v *= dt.type(b2)
            v += dt.type(1 - b2) * (g * g)
            denom = np.sqrt(v / dt.type(c2)) + dt.type(self.eps)
            p.data -= dt.type(lr / c1) * m / denom

    def state_arrays(self) -> dict:
        out = {}
        for n in self.params:
            out[f"opt.m.{n}"] = self.m[n]
            out[f"opt.v.{n}"] = self.v[n]
        return out

    def load_state(self, arrays, t: int) -> None:
        for n, p in self.params.items():
            self.m[n] = np.asarray(arrays[f"opt.m.{n}"], dtype=p.data.dtype).copy()
            self.v[n] = np.asarray(arrays[f"opt.v.{n}"], dtype=p.data.dtype).copy()
        self.t = t


# ---------------------------------------------------------------------------
# checkpoints
#
# Integer metadata is split into 16-bit chunks so it survives the f32-only
# container exactly.


def encode_int(n: int) -> np.ndarray:
    n = int(n)
    if n < 0:
        raise ValueError("only non-negative integers are stored")
    return np.array([(n >> (16 * i)) & 0xFFFF for i in range(4)], dtype=np.float32)


def decode_int(a: np.ndarray) -> int:
    return sum(int(v) << (16 * i) for i, v in enumerate(np.asarray(a).tolist()))


_META_INTS = ("stage", "iteration", "seed", "scale", "channels", "down_channels", "unet_levels",
              "resblocks_per_level", "n_koala", "n_res", "use_koala", "has_down", "has_up")


class Checkpoint(NamedTuple):
    meta: dict
    arrays: "dict[str, np.ndarray]"

    @property
    def iteration(self) -> int:
        return self.meta["iteration"]

    def down(self, dtype=np.float32) -> Downsampler:
        if not self.meta["has_down"]:
            raise KeyError("checkpoint holds no downsampling network")
        cfg = DownsamplerConfig(self.meta["down_channels"], self.meta["unet_levels"],
                                self.meta["resblocks_per_level"])
        net = build_downsampler(cfg, 0, dtype)
        net.weights.load_arrays(self.arrays, "down.")
        return net

    def up(self, dtype=np.float32) -> Upsampler:
        if not self.meta["has_up"]:
            raise KeyError("checkpoint holds no upsampling network")
        cfg = UpsamplerConfig(self.meta["scale"], self.meta["channels"], self.meta["n_koala"],
                              self.meta["n_res"], bool(self.meta["use_koala"]))
        net = build_upsampler(cfg, 0, dtype)
        net.weights.load_arrays(self.arrays, "up.")
        return net


def save_checkpoint(path, cfg: TrainConfig, iteration: int, down: Optional[Downsampler],
                    up: Optional[Upsampler], opt: Optional[Adam] = None) -> None:
    meta = dict(stage=cfg.stage, iteration=iteration, seed=cfg.seed, scale=cfg.scale,
                channels=cfg.channels, down_channels=cfg.down_channels,
                unet_levels=cfg.unet_levels, resblocks_per_level=cfg.resblocks_per_level,
                n_koala=cfg.n_koala, n_res=cfg.n_res,
                use_koala=int(up is not None and up.cfg.use_koala),
                has_down=int(down is not None), has_up=int(up is not None))
    if down is not None:
        meta.update(down_channels=down.cfg.base_channels, unet_levels=down.cfg.unet_levels,
                    resblocks_per_level=down.cfg.resblocks_per_level)
    if up is not None:
        meta.update(scale=up.cfg.scale, channels=up.cfg.channels, n_koala=up.cfg.n_koala,
                    n_res=up.cfg.n_res)
    entries = {f"meta.{k}": encode_int(v) for k, v in meta.items()}
    if down is not None:
        entries.update(down.weights.arrays("down."))
    if up is not None:
        entries.update(up.weights.arrays("up."))
    if opt is not None:
        entries.update(opt.state_arrays())
    tmp = Path(str(path) + ".tmp")
    formats.save(tmp, entries)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    arrays = formats.load(path)
    meta = {}
    for k in _META_INTS:
        key = f"meta.{k}"
        if key not in arrays:
            raise formats.FormatError(f"{path}: missing {key}")
        meta[k] = decode_int(arrays[key])
    return Checkpoint(meta, arrays)


# ---------------------------------------------------------------------------
# losses per stage


def stage1_loss(down: Downsampler, batch: Batch, cfg: TrainConfig) -> tuple[Tensor, dict]:
    X = Tensor(batch.X)
    F_d = down(X)
    X_hat = reconstruct_lr(Tensor(batch.Y), F_d, cfg.scale, cfg.padding)
    total, recon, kern = downsampler_loss(X_hat, X, F_d, batch.k_d)
    return total, {"loss_lr_recon": recon.item(), "loss_kernel": kern.item()}


def stage2_loss(up: Upsampler, batch: Batch, cfg: TrainConfig) -> tuple[Tensor, dict]:
    out = up(Tensor(batch.X))
    sr = ops.l1_loss(out.sr, Tensor(batch.Y))
    return sr, {"loss_sr": sr.item()}


def stage3_loss(down: Downsampler, up: Upsampler, batch: Batch,
                cfg: TrainConfig) -> tuple[Tensor, dict]:
    X, Y = Tensor(batch.X), Tensor(batch.Y)
    F_d = down(X)
    X_hat = reconstruct_lr(Y, F_d, cfg.scale, cfg.padding)
    _, recon, kern = downsampler_loss(X_hat, X, F_d, batch.k_d)
    sr = ops.l1_loss(up(X, F_d).sr, Y)
    total = recon + sr
    if cfg.stage3_kernel_term:
        total = total + kern
    return total, {"loss_lr_recon": recon.item(), "loss_kernel": kern.item(), "loss_sr": sr.item()}


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    iteration: int
    down: Optional[Downsampler] = None
    up: Optional[Upsampler] = None
    history: list = field(default_factory=list)


def _read_log(path: Path, upto: int) -> list:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return [r for r in csv.DictReader(fh) if int(r["iter"]) < upto]


def _write_log(path: Path, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, LOG_FIELDS)
        w.writeheader()
        w.writerows(rows)


def _run(cfg: TrainConfig, pool: HRPool, down: Optional[Downsampler], up: Optional[Upsampler],
         loss_fn: Callable[[Batch], tuple], start: int, opt: Adam,
         on_step: Optional[Callable] = None) -> TrainResult:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path, ckpt_path = cfg.log_path(), cfg.ckpt_path()
    rows = _read_log(log_path, start) if start > 0 else []
    end = cfg.total_iters if not cfg.stop_at else min(cfg.stop_at, cfg.total_iters)
    end = max(end, start)
    params = opt.params
    t0 = time.perf_counter()
    for it in range(start, end):
        batch = sample_batch(pool, cfg, batch_rng(cfg, it))
        for p in params.values():
            p.zero_grad()
        with Tape() as tape:
            loss, terms = loss_fn(batch)
            value = loss.item()
            if not math.isfinite(value) or not all(math.isfinite(v) for v in terms.values()):
                raise TrainingDiverged(it, {"loss": value, **terms})
            tape.backward(loss)
            # drop saved activations now, not when the next graph is half built
            tape.clear()
        del loss, tape
        lr = lr_at(it, cfg)
        opt.step(lr)
        if it % cfg.log_every == 0 or it == end - 1:
            row = {"iter": str(it), "lr": repr(lr), "loss": repr(value), "loss_lr_recon": "",
                   "loss_kernel": "", "loss_sr": "", "wall_time": f"{time.perf_counter() - t0:.3f}"}
            row.update({k: repr(v) for k, v in terms.items()})
            rows.append(row)
        if on_step is not None:
            on_step(it, value, terms)
        done = it + 1
        if cfg.ckpt_every and done % cfg.ckpt_every == 0 and done < end:
            save_checkpoint(ckpt_path, cfg, done, down, up, opt)
            _write_log(log_path, rows)
    done = end
    save_checkpoint(ckpt_path, cfg, done, down, up, opt)
    _write_log(log_path, rows)
    log.info("stage %d stopped at iteration %d", cfg.stage, done)
    return TrainResult(ckpt_path, log_path, done, down, up, rows)


def _resume(cfg: TrainConfig, resume, down, up) -> tuple[int, Optional[Checkpoint]]:
    if resume is None:
        return 0, None
    ck = load_checkpoint(resume)
    if ck.meta["stage"] != cfg.stage:
        raise ValueError(f"checkpoint is from stage {ck.meta['stage']}, not {cfg.stage}")
    if down is not None:
        down.weights.load_arrays(ck.arrays, "down.")
    if up is not None:
        up.weights.load_arrays(ck.arrays, "up.")
    return ck.iteration, ck


def _named_params(down: Optional[Downsampler], up: Optional[Upsampler]) -> dict:
    out = {}
    if down is not None:
        out.update((f"down.{n}", t) for n, t in down.weights.items())
    if up is not None:
        out.update((f"up.{n}", t) for n, t in up.weights.items())
    return out


def _finish_early(cfg, start, down, up):
    log.info("checkpoint already at iteration %d of %d; nothing to do", start, cfg.total_iters)
    return TrainResult(cfg.ckpt_path(), cfg.log_path(), start, down, up,
                       _read_log(cfg.log_path(), start))


def _pool_for(cfg: TrainConfig, pool: Optional[HRPool]) -> HRPool:
    if pool is not None:
        return pool
    if not cfg.hr_dir:
        raise ValueError("no HR pool given and hr_dir not set")
    return HRPool.from_dir(cfg.hr_dir)


def train_stage1(cfg: TrainConfig, pool: Optional[HRPool] = None, resume=None,
                 on_step=None) -> TrainResult:
    """Pre-train the downsampler with the reconstruction + kernel-mean loss."""
    cfg = dataclasses.replace(cfg, stage=1)
    cfg.validate()
    down = build_downsampler(cfg.down_config, cfg.seed)
    start, ck = _resume(cfg, resume, down, None)
    if start >= cfg.total_iters:
        return _finish_early(cfg, start, down, None)
    opt = Adam(_named_params(down, None))
    if ck is not None:
        opt.load_state(ck.arrays, start)
    return _run(cfg, _pool_for(cfg, pool), down, None, lambda b: stage1_loss(down, b, cfg),
                start, opt, on_step)


def train_stage2(cfg: TrainConfig, pool: Optional[HRPool] = None, resume=None,
                 on_step=None) -> TrainResult:
    """Pre-train the Baseline upsampler (plain residual blocks, no kernel input)."""
    cfg = dataclasses.replace(cfg, stage=2)
    cfg.validate()
    up = build_upsampler(cfg.up_config(False), cfg.seed)
    start, ck = _resume(cfg, resume, None, up)
    if start >= cfg.total_iters:
        return _finish_early(cfg, start, None, up)
    opt = Adam(_named_params(None, up))
    if ck is not None:
        opt.load_state(ck.arrays, start)
    return _run(cfg, _pool_for(cfg, pool), None, up, lambda b: stage2_loss(up, b, cfg),
                start, opt, on_step)


def init_stage3(cfg: TrainConfig, ckpt1, ckpt2) -> tuple[Downsampler, Upsampler]:
    """Downsampler from stage 1, Baseline from stage 2 upgraded with zero-init KOALA heads."""
    c1 = load_checkpoint(ckpt1)
    c2 = load_checkpoint(ckpt2)
    if c2.meta["use_koala"]:
        raise ValueError("stage-2 checkpoint should hold the Baseline upsampler")
    if c2.meta["scale"] != cfg.scale:
        raise ValueError(f"stage-2 checkpoint is x{c2.meta['scale']}, config asks x{cfg.scale}")
    return c1.down(), upgrade_to_koala(c2.up(), cfg.seed)


def train_stage3(cfg: TrainConfig, ckpt1=None, ckpt2=None, pool: Optional[HRPool] = None,
                 resume=None, on_step=None) -> TrainResult:
    """Jointly optimise both networks with l1(X_hat, X) + l1(Y_hat, Y)."""
    cfg = dataclasses.replace(cfg, stage=3)
    cfg.validate()
    if resume is not None:
        ck = load_checkpoint(resume)
        down, up = ck.down(), ck.up()
        start = ck.iteration
        if ck.meta["stage"] != 3:
            raise ValueError(f"checkpoint is from stage {ck.meta['stage']}, not 3")
    elif ckpt1 is not None and ckpt2 is not None:
        down, up = init_stage3(cfg, ckpt1, ckpt2)
        start, ck = 0, None
    else:
        raise ValueError("stage 3 needs both pre-trained checkpoints or a resume checkpoint")
    if start >= cfg.total_iters:
        return _finish_early(cfg, start, down, up)
    opt = Adam(_named_params(down, up))
    if ck is not None:
        opt.load_state(ck.arrays, start)
    return _run(cfg, _pool_for(cfg, pool), down, up, lambda b: stage3_loss(down, up, b, cfg),
                start, opt, on_step)


def run_stage(cfg: TrainConfig, pool: Optional[HRPool] = None, resume=None,
              init_down=None, init_up=None) -> TrainResult:
    if cfg.stage == 1:
        return train_stage1(cfg, pool, resume)
    if cfg.stage == 2:
        return train_stage2(cfg, pool, resume)
    return train_stage3(cfg, init_down, init_up, pool, resume)
