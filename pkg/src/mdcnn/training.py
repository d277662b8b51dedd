"""Training procedures for the generator / reconstruction / virtual-codec trio.

Two procedures are provided:

* :func:`train_algorithm1` alternates three phases per outer iteration:
  reconstruction networks on JPEG-decoded descriptions, virtual codec on
  the lossless descriptions (mimicking the reconstruction outputs), then the
  generator with the virtual codec frozen standing in for codec plus
  reconstruction.  A final reconstruction phase closes the loop.
* :func:`train_algorithm2` pre-trains the virtual codec, then updates the
  generator and the reconstruction networks in the same step, the generator
  receiving its reconstruction gradient through the virtual codec.

The JPEG codec never appears inside an autograd graph.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import codec
from .imaging import PatchSet, polyphase_split
from .losses import LossConfig, LossValue, mdgn_loss, mdrn_loss, mdvcn_loss
from .networks import ModelBundle, init_params, save_checkpoint

__all__ = [
    "TrainingConfig",
    "TrainLog",
    "TrainingDiverged",
    "MimicryWarning",
    "lr_at_step",
    "train_algorithm1",
    "train_algorithm2",
    "joint_step_losses",
    "generator_gradients",
    "codec_roundtrip",
]


class TrainingDiverged(RuntimeError):
    pass


class MimicryWarning(UserWarning):
    """The virtual codec is a poor stand-in for codec + reconstruction."""


@dataclass
class TrainingConfig:
    algorithm: int = 1
    iterations: int | None = None  # R for algorithm 1, T for algorithm 2
    epochs_p: int = 2
    epochs_q: int = 2
    epochs_l: int = 4
    pretrain_epochs: int = 2
    batch: int = 16
    lr0: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    qf: int = 10
    seed: int = 0
    widths: int = 128
    beta: float | None = None  # overrides the QF schedule when set
    mimicry_threshold: float = 1.0
    divergence_threshold: float = 1e4
    dtype: str = "float32"
    diagnostic_path: str | None = None

    def __post_init__(self):
        if self.algorithm not in (1, 2):
            raise ValueError(f"algorithm must be 1 or 2, got {self.algorithm}")
        if self.iterations is None:
            self.iterations = 3 if self.algorithm == 1 else 1
        for name in ("iterations", "epochs_p", "epochs_q", "epochs_l", "batch", "widths"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be >= 0")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        codec.CodecConfig(self.qf)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def steps(self, phase: str | None = None) -> list[dict]:
        return [r for r in self.records if r["kind"] == "step" and (phase is None or r["phase"] == phase)]

    def phases(self, phase: str | None = None) -> list[dict]:
        return [r for r in self.records if r["kind"] == "phase" and (phase is None or r["phase"] == phase)]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "TrainLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def lr_at_step(step: int, total_steps: int, lr0: float) -> float:
    """Piecewise-constant decay: lr0, then lr0/2 from 3/5 of the run, lr0/4 from 4/5."""
    if total_steps < 1 or not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    # integer comparisons keep the boundaries exact
    if 5 * step < 3 * total_steps:
        return lr0
    if 5 * step < 4 * total_steps:
        return lr0 / 2
    return lr0 / 4


# ---------------------------------------------------------------------------
# data helpers


def codec_roundtrip(descriptions: torch.Tensor, qf: int) -> torch.Tensor:
    """JPEG encode/decode every description in a ``(n, 1, h, w)`` batch.

    Runs outside autograd; the result is a new leaf tensor.
    """
    cfg = codec.CodecConfig(qf)
    arr = descriptions.detach().cpu().clamp(0, 1).numpy()
    out = np.empty_like(arr)
    for i in range(arr.shape[0]):
        out[i, 0] = codec.decode(codec.encode(arr[i, 0], cfg))
    return torch.from_numpy(out).to(descriptions.dtype)


def _chunks(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


@torch.no_grad()
def _generate(bundle: ModelBundle, images: torch.Tensor, batch: int):
    outs_a, outs_b = [], []
    for sl in _chunks(images.shape[0], batch):
        a, b = bundle.generator(images[sl])
        outs_a.append(a.clamp(0, 1))
        outs_b.append(b.clamp(0, 1))
    return torch.cat(outs_a), torch.cat(outs_b)


@torch.no_grad()
def _reconstruct(bundle: ModelBundle, a: torch.Tensor, b: torch.Tensor, batch: int):
    parts = [bundle.reconstruct(a[sl], b[sl]) for sl in _chunks(a.shape[0], batch)]
    return tuple(torch.cat([p[k] for p in parts]) for k in range(3))


def _set_trainable(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _params(modules) -> list[torch.nn.Parameter]:
    return [p for m in modules for p in m.parameters()]


# ---------------------------------------------------------------------------
# trainer


class _Trainer:
    def __init__(self, patches, cfg: TrainingConfig, bundle: ModelBundle | None, log: TrainLog | None):
        images = patches.patches if isinstance(patches, PatchSet) else np.asarray(patches)
        if images.ndim != 3 or images.shape[0] == 0:
            raise ValueError("need a non-empty (n, H, W) patch array")
        if images.shape[1] % 2 or images.shape[2] % 2:
            raise ValueError("patch dimensions must be even")
        self.cfg = cfg
        self.n = images.shape[0]
        if cfg.batch > self.n:
            raise ValueError(f"batch size {cfg.batch} exceeds the {self.n} training patches")
        self.nb = self.n // cfg.batch
        dtype = cfg.torch_dtype
        self.images = torch.as_tensor(images, dtype=dtype)[:, None]
        self.bundle = bundle if bundle is not None else init_params(cfg.seed, cfg.widths, dtype)
        self.bundle.to(dtype)
        self.log = log if log is not None else TrainLog()
        self.loss_cfg = LossConfig()
        self.step = 0
        self.shuffle_gen = torch.Generator().manual_seed(cfg.seed)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt = {
            "omega": torch.optim.Adam(_params([self.bundle.generator]), lr=cfg.lr0, betas=betas),
            "alpha": torch.optim.Adam(_params(self.bundle.alpha()), lr=cfg.lr0, betas=betas),
            "theta": torch.optim.Adam(_params(self.bundle.theta()), lr=cfg.lr0, betas=betas),
        }
        self.role_step = {"omega": 0, "alpha": 0, "theta": 0}
        self.role_total = {"omega": 1, "alpha": 1, "theta": 1}

    # -- bookkeeping -------------------------------------------------------

    def _set_lr(self, role: str) -> float:
        lr = lr_at_step(self.role_step[role], self.role_total[role], self.cfg.lr0)
        for group in self.opt[role].param_groups:
            group["lr"] = lr
        return lr

    def _guard(self, loss: LossValue, phase: str) -> None:
        value = float(loss.total.detach())
        if not math.isfinite(value) or abs(value) > self.cfg.divergence_threshold:
            path = self.cfg.diagnostic_path
            if path:
                self.bundle.metadata["diverged"] = {"phase": phase, "step": self.step, "loss": repr(value)}
                save_checkpoint(self.bundle, path)
            raise TrainingDiverged(
                f"loss {value!r} in phase {phase!r} at step {self.step}"
                + (f"; diagnostic checkpoint written to {path}" if path else "")
            )

    def _record_step(self, phase: str, iteration: int, epoch: int, lrs: dict, losses: dict) -> None:
        rec = {"kind": "step", "step": self.step, "phase": phase, "iteration": iteration, "epoch": epoch}
        rec.update({f"lr_{k}": v for k, v in lrs.items()})
        rec["lr"] = next(iter(lrs.values()))
        rec.update(losses)
        self.log.records.append(rec)
        self.step += 1

    def _record_phase(self, phase: str, iteration: int, start: float, end: float) -> None:
        self.log.records.append(
            {"kind": "phase", "step": self.step, "phase": phase, "iteration": iteration,
             "loss_start": start, "loss_end": end}
        )

    def _batches(self):
        perm = torch.randperm(self.n, generator=self.shuffle_gen)
        for i in range(self.nb):
            yield perm[i * self.cfg.batch : (i + 1) * self.cfg.batch]

    def _update(self, role: str, loss: torch.Tensor) -> None:
        opt = self.opt[role]
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        self.role_step[role] += 1

    # -- dataset-level evaluation -----------------------------------------

    @torch.no_grad()
    def eval_mdrn(self, dec_a, dec_b) -> float:
        total = 0.0
        for sl in _chunks(self.n, self.cfg.batch):
            out = self.bundle.reconstruct(dec_a[sl], dec_b[sl])
            total += float(mdrn_loss(self.images[sl], *out).total) * (sl.stop - sl.start)
        return total / self.n

    @torch.no_grad()
    def eval_mdvcn(self, a, b, targets) -> float:
        total = 0.0
        for sl in _chunks(self.n, self.cfg.batch):
            virt = self.bundle.virtual(a[sl], b[sl])
            total += float(mdvcn_loss([t[sl] for t in targets], virt).total) * (sl.stop - sl.start)
        return total / self.n

    @torch.no_grad()
    def eval_mdgn(self) -> float:
        total = 0.0
        for sl in _chunks(self.n, self.cfg.batch):
            total += float(self._generator_loss(self.images[sl]).total) * (sl.stop - sl.start)
        return total / self.n

    # -- single updates ----------------------------------------------------

    def _generator_loss(self, imgs: torch.Tensor) -> LossValue:
        a, b = self.bundle.generator(imgs)
        return _generator_objective(self.bundle, imgs, a, b, self.cfg.qf, self.loss_cfg, self.cfg.beta)

    def mdrn_step(self, idx, dec_a, dec_b) -> LossValue:
        out = self.bundle.reconstruct(dec_a[idx], dec_b[idx])
        loss = mdrn_loss(self.images[idx], *out)
        return loss

    # -- phases ------------------------------------------------------------

    def _run_phase(self, phase, iteration, epochs, role, step_fn, eval_fn) -> None:
        start = eval_fn()
        for epoch in range(epochs):
            for idx in self._batches():
                lr = self._set_lr(role)
                loss = step_fn(idx)
                self._guard(loss, phase)
                self._update(role, loss.total)
                self._record_step(phase, iteration, epoch, {role: lr}, loss.as_dict())
        end = eval_fn()
        self._record_phase(phase, iteration, start, end)

    def phase_mdrn(self, phase, iteration, epochs, dec_a, dec_b) -> None:
        _set_trainable([self.bundle.generator] + self.bundle.theta(), False)
        _set_trainable(self.bundle.alpha(), True)
        self._run_phase(
            phase, iteration, epochs, "alpha",
            lambda idx: self.mdrn_step(idx, dec_a, dec_b),
            lambda: self.eval_mdrn(dec_a, dec_b),
        )

    def phase_mdvcn(self, phase, iteration, epochs, a, b, targets) -> None:
        _set_trainable([self.bundle.generator] + self.bundle.alpha(), False)
        _set_trainable(self.bundle.theta(), True)

        def step(idx):
            return mdvcn_loss([t[idx] for t in targets], self.bundle.virtual(a[idx], b[idx]))

        self._run_phase(phase, iteration, epochs, "theta", step, lambda: self.eval_mdvcn(a, b, targets))

    def phase_mdgn(self, phase, iteration, epochs) -> None:
        _set_trainable(self.bundle.alpha() + self.bundle.theta(), False)
        _set_trainable([self.bundle.generator], True)
        self._run_phase(
            phase, iteration, epochs, "omega",
            lambda idx: self._generator_loss(self.images[idx]),
            self.eval_mdgn,
        )

    def finish(self, algorithm: int) -> ModelBundle:
        _set_trainable([self.bundle], True)
        meta = self.bundle.metadata
        meta.update(
            {"qf": self.cfg.qf, "seed": self.cfg.seed, "algorithm": algorithm, "width": self.bundle.width,
             "steps": dict(self.role_step), "total_steps": self.step}
        )
        self.bundle.train_log = self.log
        return self.bundle


def _generator_objective(bundle, imgs, a, b, qf, loss_cfg, beta) -> LossValue:
    """Generator loss plus the reconstruction loss routed through the virtual codec."""
    gen = mdgn_loss(a, b, imgs, qf, loss_cfg, beta=beta)
    virt = mdrn_loss(imgs, *bundle.virtual(a, b))
    terms = dict(gen.terms)
    terms.update({f"virtual_{k}": v for k, v in virt.terms.items()})
    return LossValue(gen.total + virt.total, terms)


def train_algorithm1(
    patches, cfg: TrainingConfig, bundle: ModelBundle | None = None, log: TrainLog | None = None
) -> ModelBundle:
    """Alternating three-phase training.  The returned bundle carries the
    :class:`TrainLog` as ``bundle.train_log``."""
    t = _Trainer(patches, cfg, bundle, log)
    R, p, q, nb = cfg.iterations, cfg.epochs_p, cfg.epochs_q, t.nb
    t.role_total = {"alpha": (R + 1) * p * nb, "theta": R * p * nb, "omega": R * q * nb}
    bundle = t.bundle

    pair = polyphase_split(t.images)
    desc_a, desc_b = pair.a.contiguous(), pair.b.contiguous()
    for r in range(R):
        dec_a, dec_b = codec_roundtrip(desc_a, cfg.qf), codec_roundtrip(desc_b, cfg.qf)
        t.phase_mdrn("mdrn", r, p, dec_a, dec_b)
        targets = _reconstruct(bundle, dec_a, dec_b, cfg.batch)
        t.phase_mdvcn("mdvcn", r, p, desc_a, desc_b, targets)
        t.phase_mdgn("mdgn", r, q)
        desc_a, desc_b = _generate(bundle, t.images, cfg.batch)
    dec_a, dec_b = codec_roundtrip(desc_a, cfg.qf), codec_roundtrip(desc_b, cfg.qf)
    t.phase_mdrn("mdrn_final", R, p, dec_a, dec_b)
    return t.finish(1)


def joint_step_losses(bundle: ModelBundle, images, dec_a, dec_b, qf, loss_cfg=LossConfig(), beta=None):
    """Losses of one simultaneous generator/reconstruction update.

    Returns ``(generator_loss, reconstruction_loss)``.  The reconstruction
    loss uses the decoded descriptions; the generator loss reaches omega only
    through the virtual codec, so the decoded tensors never enter its graph.
    """
    a, b = bundle.generator(images)
    gen = _generator_objective(bundle, images, a, b, qf, loss_cfg, beta)
    rec = mdrn_loss(images, *bundle.reconstruct(dec_a, dec_b))
    return gen, rec, (a, b)


def train_algorithm2(
    patches, cfg: TrainingConfig, bundle: ModelBundle | None = None, log: TrainLog | None = None
) -> ModelBundle:
    """Joint training with virtual-codec gradient substitution."""
    t = _Trainer(patches, cfg, bundle, log)
    T, l, nb = cfg.iterations, cfg.epochs_l, t.nb
    t.role_total = {
        "alpha": T * l * nb,
        "omega": T * l * nb,
        "theta": (cfg.pretrain_epochs + T * l) * nb,
    }
    bundle = t.bundle

    # pre-train the virtual codec against the initial reconstruction networks
    pair = polyphase_split(t.images)
    desc_a, desc_b = pair.a.contiguous(), pair.b.contiguous()
    if cfg.pretrain_epochs:
        dec_a, dec_b = codec_roundtrip(desc_a, cfg.qf), codec_roundtrip(desc_b, cfg.qf)
        targets = _reconstruct(bundle, dec_a, dec_b, cfg.batch)
        t.phase_mdvcn("mdvcn_pretrain", 0, cfg.pretrain_epochs, desc_a, desc_b, targets)

    for it in range(T):
        for epoch in range(l):
            mimicry = []
            for idx in t._batches():
                imgs = t.images[idx]
                # a) descriptions and their decoded versions (outside autograd)
                with torch.no_grad():
                    a0, b0 = bundle.generator(imgs)
                dec_a, dec_b = codec_roundtrip(a0, cfg.qf), codec_roundtrip(b0, cfg.qf)
                # b) simultaneous omega / alpha update, theta frozen
                _set_trainable(bundle.theta(), False)
                _set_trainable([bundle.generator] + bundle.alpha(), True)
                lr_w, lr_a = t._set_lr("omega"), t._set_lr("alpha")
                gen, rec, (a, b) = joint_step_losses(bundle, imgs, dec_a, dec_b, cfg.qf, t.loss_cfg, cfg.beta)
                t._guard(gen, "joint")
                t._guard(rec, "joint")
                t.opt["omega"].zero_grad(set_to_none=True)
                t.opt["alpha"].zero_grad(set_to_none=True)
                (gen.total + rec.total).backward()
                t.opt["omega"].step()
                t.opt["alpha"].step()
                t.role_step["omega"] += 1
                t.role_step["alpha"] += 1
                losses = {f"gen_{k}": v for k, v in gen.as_dict().items()}
                losses.update({f"rec_{k}": v for k, v in rec.as_dict().items()})
                t._record_step("joint", it, epoch, {"omega": lr_w, "alpha": lr_a}, losses)
                # c) reconstructions with the updated alpha
                with torch.no_grad():
                    targets = bundle.reconstruct(dec_a, dec_b)
                # d) virtual codec update on the lossless descriptions
                _set_trainable([bundle.generator] + bundle.alpha(), False)
                _set_trainable(bundle.theta(), True)
                lr_t = t._set_lr("theta")
                src_a, src_b = a.detach().clamp(0, 1), b.detach().clamp(0, 1)
                vloss = mdvcn_loss(targets, bundle.virtual(src_a, src_b))
                t._guard(vloss, "mdvcn")
                t._update("theta", vloss.total)
                t._record_step("mdvcn", it, epoch, {"theta": lr_t}, vloss.as_dict())
                mimicry.append(float(vloss.total.detach()))
            mean = float(np.mean(mimicry))
            if mean > cfg.mimicry_threshold:
                warnings.warn(
                    f"virtual codec mimicry loss {mean:.4f} exceeds {cfg.mimicry_threshold}; "
                    "generator gradients may be unreliable",
                    MimicryWarning,
                    stacklevel=2,
                )
    return t.finish(2)


def generator_gradients(
    bundle: ModelBundle, images: torch.Tensor, qf: int, path: str = "virtual", beta: float | None = None
) -> torch.Tensor:
    """Flattened gradient of the generator objective with respect to omega.

    ``path="virtual"`` routes the reconstruction term through the virtual
    codec; ``path="true"`` through the reconstruction networks applied to the
    lossless descriptions (codec bypassed).
    """
    if path not in ("virtual", "true"):
        raise ValueError(f"unknown path {path!r}")
    params = list(bundle.generator.parameters())
    a, b = bundle.generator(images)
    gen = mdgn_loss(a, b, images, qf, LossConfig(), beta=beta)
    outs = bundle.virtual(a, b) if path == "virtual" else bundle.reconstruct(a, b)
    total = gen.total + mdrn_loss(images, *outs).total
    grads = torch.autograd.grad(total, params)
    return torch.cat([g.reshape(-1) for g in grads])


def config_from_mapping(values: dict) -> TrainingConfig:
    """Build a config from string/number values, rejecting unknown keys."""
    known = {f.name: f for f in fields(TrainingConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ValueError(f"unknown training config keys: {unknown}")
    kwargs = {}
    for key, raw in values.items():
        kwargs[key] = _coerce(known[key].type, raw)
    return TrainingConfig(**kwargs)


def _coerce(type_name, raw):
    if not isinstance(raw, str):
        return raw
    if raw.lower() in ("none", "null", ""):
        return None
    t = str(type_name)
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    return raw


def config_dict(cfg: TrainingConfig) -> dict:
    return asdict(cfg)
