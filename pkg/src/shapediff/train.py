"""Training loops (backbone pretrain + conditional finetune), Adam, and the
checkpoint container.

Determinism contract: one Rng drives batch selection, per-item policy draws,
timesteps and noise, in a fixed order; dataset latents are precomputed before
the loop, so a run is a pure function of (dataset bytes, TrainConfig). The
checkpoint stores optimizer slots and the Rng state, letting an interrupted
run resume bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .codec import Codec, DEFAULT_CODEC, encode, voxelize
from .diffusion import NoiseSchedule, batch_loss, c_clip_for
from .model import (
    BackboneConfig,
    Denoiser,
    VARIANT_KINDS,
    build_variant,
    init_backbone,
)
from .numcore import Rng, Tensor
from .shapegen import VOCAB, DatasetItem, abstract_shape, render_text, strip_style

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "CheckpointError",
    "Adam",
    "pretrain_backbone",
    "finetune",
    "save_checkpoint",
    "load_checkpoint",
    "write_log_csv",
]

TASKS = ("pretrain", "abstraction", "editing", "stylization")


@dataclass(frozen=True)
class TrainConfig:
    task: str = "pretrain"
    variant: str = "shap_e_ft"
    lr: float = 1e-3
    batch: int = 8
    steps: int = 3000
    text_drop_p: float = 0.5
    guidance_swap_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.variant not in VARIANT_KINDS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not (0.0 <= self.text_drop_p <= 1.0 and 0.0 <= self.guidance_swap_p <= 1.0):
            raise ValueError("dropout probabilities must lie in [0, 1]")


def parse_config_text(text: str) -> TrainConfig:
    """key=value lines; '#' starts a comment; unknown keys are errors."""
    import dataclasses

    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    casts = {"task": str, "variant": str, "lr": float, "batch": int, "steps": int,
             "text_drop_p": float, "guidance_swap_p": float, "seed": int}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        kwargs[key] = casts[key](value)
    return TrainConfig(**kwargs)


def config_text(cfg: TrainConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in asdict(cfg).items())


class Adam:
    """Adam with bias correction and global-norm gradient clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip: float = 1.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps, self.clip = beta1, beta2, eps, clip
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        scale = self.clip / total if total > self.clip else 1.0
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            g = (g * scale).astype(self.m[k].dtype)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            p = self.params[k]
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"SDCK"
_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: BackboneConfig
    task: str
    train_cfg: TrainConfig
    step: int
    c_clip: float
    codec_config: dict
    sched_config: dict
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    rng_state: dict
    losses: list[float] = field(default_factory=list)

    def build_model(self) -> Denoiser:
        params = {}
        for name, arr in self.params.items():
            t = Tensor(arr.copy())
            if self.kind == "controlnet3d":
                t.requires_grad = name.startswith(("ctrl.", "cond."))
            else:
                t.requires_grad = True
            params[name] = t
        return Denoiser(self.config, self.kind, params)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(**self.sched_config)

    def codec(self) -> Codec:
        return Codec(**self.codec_config)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """magic, u32 version, u32 header length, JSON header, then raw float32
    array bytes in header order."""
    arrays: list[tuple[str, np.ndarray]] = []
    for group, d in (("p", ckpt.params), ("m", ckpt.adam_m), ("v", ckpt.adam_v)):
        for name in sorted(d):
            arrays.append((f"{group}:{name}", np.ascontiguousarray(d[name], dtype=np.float32)))
    header = {
        "kind": ckpt.kind,
        "config": asdict(ckpt.config),
        "task": ckpt.task,
        "train_cfg": asdict(ckpt.train_cfg),
        "step": ckpt.step,
        "c_clip": ckpt.c_clip,
        "codec_config": ckpt.codec_config,
        "sched_config": ckpt.sched_config,
        "adam_t": ckpt.adam_t,
        "rng_state": ckpt.rng_state,
        "losses": ckpt.losses,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(a.tobytes())


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    header = json.loads(raw[12:12 + hlen].decode())
    off = 12 + hlen
    groups: dict[str, dict[str, np.ndarray]] = {"p": {}, "m": {}, "v": {}}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint arrays")
        arr = np.frombuffer(raw[off:off + nbytes], dtype=np.float32).reshape(shape).copy()
        off += nbytes
        group, name = entry["name"].split(":", 1)
        groups[group][name] = arr
    cfg = header["config"]
    cfg["vocab"] = tuple(cfg["vocab"])
    ckpt = Checkpoint(
        kind=header["kind"],
        config=BackboneConfig(**cfg),
        task=header["task"],
        train_cfg=TrainConfig(**header["train_cfg"]),
        step=header["step"],
        c_clip=header["c_clip"],
        codec_config=header["codec_config"],
        sched_config=header["sched_config"],
        params=groups["p"],
        adam_m=groups["m"],
        adam_v=groups["v"],
        adam_t=header["adam_t"],
        rng_state=header["rng_state"],
        losses=list(header["losses"]),
    )
    if expect_kind is not None and ckpt.kind != expect_kind:
        raise CheckpointError(
            f"{path}: wrong variant kind {ckpt.kind!r} (expected {expect_kind!r})")
    return ckpt


def write_log_csv(path: str | Path, losses: list[float], lr: float) -> None:
    lines = ["step,loss,lr"]
    lines += [f"{i},{loss:.8g},{lr:g}" for i, loss in enumerate(losses)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Data assembly
# ---------------------------------------------------------------------------

def _latent(spec, codec: Codec) -> np.ndarray:
    return encode(voxelize(spec, codec.resolution), codec).astype(np.float32)


def _check_resumable(resume: Checkpoint, cfg: TrainConfig) -> None:
    """A resumed run may extend steps but nothing else may change."""
    a = {k: v for k, v in asdict(resume.train_cfg).items() if k != "steps"}
    b = {k: v for k, v in asdict(cfg).items() if k != "steps"}
    if a != b:
        raise CheckpointError("config mismatch: resume checkpoint was trained differently")
    if cfg.steps < resume.step:
        raise CheckpointError(
            f"config mismatch: checkpoint is already past step {cfg.steps}")


def _task_arrays(items: list[DatasetItem], task: str, codec: Codec):
    """Precompute (z0, guidance, prompt) per item for one task."""
    z0s, zcs, prompts = [], [], []
    for item in items:
        if task == "editing":
            if item.kind != "edit_pair":
                raise ValueError("editing task needs an edit-pair dataset")
            z0s.append(_latent(item.pair.target, codec))
            zcs.append(_latent(item.pair.distractor, codec))
            prompts.append(item.pair.prompt)
            continue
        if item.kind != "shape":
            raise ValueError(f"{task} task needs a shape dataset")
        z0s.append(_latent(item.spec, codec))
        prompts.append(render_text(item.spec))
        if task == "abstraction":
            zcs.append(_latent(abstract_shape(item.spec), codec))
        elif task == "stylization":
            zcs.append(_latent(strip_style(item.spec), codec))
    z0 = np.stack(z0s)
    z_c = np.stack(zcs) if zcs else None
    return z0, z_c, prompts


def _train_loop(model: Denoiser, sched, z0, z_c, prompts, cfg: TrainConfig,
                rng: Rng, opt: Adam, losses: list[float], conditional: bool) -> None:
    n = len(prompts)
    for _ in range(cfg.steps - len(losses)):
        idx = rng.integers(0, n, (cfg.batch,))
        drop = rng.uniform(0.0, 1.0, (cfg.batch,))
        swap = rng.uniform(0.0, 1.0, (cfg.batch,))
        zb = z0[idx]
        pb = [prompts[i] for i in idx]
        cb = None
        if z_c is not None and conditional:
            cb = z_c[idx].copy()
            if cfg.task == "editing":
                # never drop text; sometimes hand the model the target itself
                m = swap < cfg.guidance_swap_p
                cb[m] = zb[m]
            else:
                pb = ["" if drop[i] < cfg.text_drop_p else pb[i] for i in range(cfg.batch)]
        elif cfg.task in ("abstraction", "stylization"):
            pb = ["" if drop[i] < cfg.text_drop_p else pb[i] for i in range(cfg.batch)]
        t = rng.integers(1, sched.t_max + 1, (cfg.batch,))
        eps = rng.normal(zb.shape)
        loss = batch_loss(model, sched, zb, pb, cb, t, eps)
        model.zero_grads()
        nc.backward(loss)
        opt.step()
        losses.append(float(loss.data))


def _checkpoint_of(model, task, cfg, opt, rng, c_clip, codec, sched, losses) -> Checkpoint:
    return Checkpoint(
        kind=model.kind,
        config=model.config,
        task=task,
        train_cfg=cfg,
        step=len(losses),
        c_clip=c_clip,
        codec_config=codec.config(),
        sched_config={"t_max": sched.t_max,
                      "beta_min": float(sched.betas[0]),
                      "beta_max": float(sched.betas[-1])},
        params={k: v.data.copy() for k, v in model.params.items()},
        adam_m={k: v.copy() for k, v in opt.m.items()},
        adam_v={k: v.copy() for k, v in opt.v.items()},
        adam_t=opt.t,
        rng_state=rng.get_state(),
        losses=list(losses),
    )


def pretrain_backbone(items: list[DatasetItem], cfg: TrainConfig,
                      codec: Codec = DEFAULT_CODEC,
                      sched: NoiseSchedule | None = None,
                      config: BackboneConfig | None = None,
                      resume: Checkpoint | None = None) -> Checkpoint:
    """Train the text-only denoiser on (latent, rendered text) pairs."""
    if cfg.task != "pretrain" or cfg.variant != "shap_e_ft":
        raise ValueError("pretraining runs the shap_e_ft variant on task 'pretrain'")
    train_items = [it for it in items if it.split == "train"]
    if not train_items:
        raise ValueError("empty dataset")
    sched = sched or NoiseSchedule()
    z0, _, prompts = _task_arrays(train_items, "pretrain", codec)
    c_clip = c_clip_for(z0)
    if resume is not None:
        _check_resumable(resume, cfg)
        model = resume.build_model()
        opt = Adam(model.trainable(), cfg.lr)
        opt.m, opt.v, opt.t = dict(resume.adam_m), dict(resume.adam_v), resume.adam_t
        rng = Rng(cfg.seed)
        rng.set_state(resume.rng_state)
        losses = list(resume.losses)
    else:
        bb_cfg = config or BackboneConfig(vocab=VOCAB, s_latent=codec.n_tokens,
                                          d_model=codec.d_latent)
        if bb_cfg.s_latent != codec.n_tokens or bb_cfg.d_model != codec.d_latent:
            raise ValueError("backbone config does not match the codec latent shape")
        rng = Rng(cfg.seed)
        model = init_backbone(bb_cfg, rng)
        opt = Adam(model.trainable(), cfg.lr)
        losses = []
    _train_loop(model, sched, z0, None, prompts, cfg, rng, opt, losses, conditional=False)
    return _checkpoint_of(model, "pretrain", cfg, opt, rng, c_clip, codec, sched, losses)


def finetune(pretrained: Checkpoint, items: list[DatasetItem], cfg: TrainConfig,
             resume: Checkpoint | None = None) -> Checkpoint:
    """Graft cfg.variant onto the pretrained backbone and train it under the
    task's guidance policy."""
    if cfg.task == "pretrain":
        raise ValueError("finetune needs a downstream task, not 'pretrain'")
    if cfg.variant == "sdedit3d":
        raise ValueError("sdedit3d is a sampling policy; finetune shap_e_ft instead")
    if pretrained.kind != "shap_e_ft":
        raise CheckpointError("finetune needs a pretrained text-only backbone")
    train_items = [it for it in items if it.split == "train"]
    if not train_items:
        raise ValueError("empty dataset")
    codec = pretrained.codec()
    sched = pretrained.schedule()
    z0, z_c, prompts = _task_arrays(train_items, cfg.task, codec)
    c_clip = c_clip_for(z0)
    conditional = cfg.variant != "shap_e_ft"
    if resume is not None:
        _check_resumable(resume, cfg)
        model = resume.build_model()
        rng = Rng(cfg.seed)
        rng.set_state(resume.rng_state)
        opt = Adam(model.trainable(), cfg.lr)
        opt.m, opt.v, opt.t = dict(resume.adam_m), dict(resume.adam_v), resume.adam_t
        losses = list(resume.losses)
    else:
        rng = Rng(cfg.seed)
        model = build_variant(cfg.variant, pretrained.build_model(), rng)
        opt = Adam(model.trainable(), cfg.lr)
        losses = []
    _train_loop(model, sched, z0, z_c, prompts, cfg, rng, opt, losses, conditional)
    return _checkpoint_of(model, cfg.task, cfg, opt, rng, c_clip, codec, sched, losses)
