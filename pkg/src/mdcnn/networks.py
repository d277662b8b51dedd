"""Generator, reconstruction and virtual-codec networks.

Layer stacks are declared as :class:`ConvSpec` tables and built into plain
``nn.Sequential`` modules.  Every convolution uses zero "same" padding; the
stride-2 transposed convolution closing each reconstruction network uses
``padding=4, output_padding=1`` so that it produces exactly twice the input
side length.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

__all__ = [
    "ConvSpec",
    "CheckpointError",
    "generator_specs",
    "reconstruction_specs",
    "Generator",
    "Reconstructor",
    "ModelBundle",
    "init_params",
    "save_checkpoint",
    "load_checkpoint",
    "ROLES",
    "FORMAT_VERSION",
    "DECONV_ALIGNMENT",
]

FORMAT_VERSION = 1
DEFAULT_WIDTH = 128
DECONV_ALIGNMENT = {"padding": 4, "output_padding": 1}
# output layers start small so early reconstructions are not dominated by noise
OUTPUT_GAIN = 0.1
ROLES = ("omega", "alpha1", "alpha2", "alpha3", "theta1", "theta2", "theta3")


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    name: str
    kernel: int
    stride: int
    c_in: int
    c_out: int
    kind: str = "conv"  # "conv" or "deconv"
    activation: str = "relu"  # "relu" or "none"

    def build(self) -> nn.Module:
        if self.kind == "deconv":
            return nn.ConvTranspose2d(
                self.c_in, self.c_out, self.kernel, stride=self.stride, **DECONV_ALIGNMENT
            )
        return nn.Conv2d(
            self.c_in, self.c_out, self.kernel, stride=self.stride, padding=self.kernel // 2
        )


def generator_specs(width: int = DEFAULT_WIDTH) -> dict[str, list[ConvSpec]]:
    """Shared feature extractor plus the two description branches."""
    fen = [
        ConvSpec("conv-1f", 9, 1, 1, width),
        ConvSpec("conv-2f", 3, 2, width, width),
        ConvSpec("conv-3f", 3, 1, width, width),
        ConvSpec("conv-4f", 3, 1, width, width),
    ]

    def branch(tag):
        return [
            ConvSpec(f"conv-5{tag}", 3, 1, width, width),
            ConvSpec(f"conv-6{tag}", 3, 1, width, width),
            ConvSpec(f"conv-7{tag}", 3, 1, width, width),
            ConvSpec(f"conv-8{tag}", 9, 1, width, 1, activation="none"),
        ]

    return {"fen": fen, "gna": branch("A"), "gnb": branch("B")}


def reconstruction_specs(c_in: int = 1, width: int = DEFAULT_WIDTH, tag: str = "a") -> list[ConvSpec]:
    specs = [ConvSpec(f"conv-1{tag}", 9, 1, c_in, width)]
    specs += [ConvSpec(f"conv-{i}{tag}", 3, 1, width, width) for i in range(2, 8)]
    specs.append(ConvSpec(f"deconv-8{tag}", 9, 2, width, 1, kind="deconv", activation="none"))
    return specs


def _stack(specs: list[ConvSpec]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for spec in specs:
        layers.append(spec.build())
        if spec.activation == "relu":
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, int]:
    # accept (H, W), (C, H, W) is ambiguous so only (H, W) and (B, C, H, W)
    if x.dim() == 2:
        return x[None, None], 2
    if x.dim() == 4:
        return x, 4
    raise ValueError(f"expected a (H, W) or (B, C, H, W) tensor, got shape {tuple(x.shape)}")


class Generator(nn.Module):
    """Multiple-description generator: one input image, two half-size outputs."""

    def __init__(self, width: int = DEFAULT_WIDTH):
        super().__init__()
        self.specs = generator_specs(width)
        self.fen = _stack(self.specs["fen"])
        self.gna = _stack(self.specs["gna"])
        self.gnb = _stack(self.specs["gnb"])

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x, ndim = _as_batch(image)
        if x.shape[1] != 1:
            raise ValueError("generator expects a single-channel image")
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"generator input {h}x{w} must have even dimensions")
        feats = self.fen(x)
        a, b = self.gna(feats), self.gnb(feats)
        if ndim == 2:
            return a[0, 0], b[0, 0]
        return a, b


class Reconstructor(nn.Module):
    """Seven convolutions and a stride-2 deconvolution; doubles the side length.

    ``c_in=1`` gives a side network, ``c_in=2`` the central network taking
    both descriptions stacked as channels.
    """

    def __init__(self, c_in: int = 1, width: int = DEFAULT_WIDTH, tag: str = "a"):
        super().__init__()
        self.c_in = c_in
        self.specs = reconstruction_specs(c_in, width, tag)
        self.body = _stack(self.specs)

    def forward(self, *descriptions: torch.Tensor) -> torch.Tensor:
        if len(descriptions) != self.c_in:
            raise ValueError(f"expected {self.c_in} description(s), got {len(descriptions)}")
        shapes = {tuple(d.shape) for d in descriptions}
        if len(shapes) != 1:
            raise ValueError(f"descriptions differ in shape: {sorted(shapes)}")
        batches = [_as_batch(d) for d in descriptions]
        ndim = batches[0][1]
        x = torch.cat([b for b, _ in batches], dim=1)
        if x.shape[1] != self.c_in:
            raise ValueError("each description must be single-channel")
        out = self.body(x)
        if out.shape[-2:] != (2 * x.shape[-2], 2 * x.shape[-1]):
            raise ValueError(f"reconstruction produced {tuple(out.shape[-2:])}, not 2x the input")
        return out[0, 0] if ndim == 2 else out


class ModelBundle(nn.Module):
    """All seven parameter sets plus metadata.

    ``generator`` is omega; ``srn_a``, ``srn_b``, ``crn`` are alpha1..3;
    ``vsrn_a``, ``vsrn_b``, ``vcrn`` are theta1..3.
    """

    def __init__(self, width: int = DEFAULT_WIDTH, metadata: dict | None = None):
        super().__init__()
        self.width = width
        self.generator = Generator(width)
        self.srn_a = Reconstructor(1, width, "a")
        self.srn_b = Reconstructor(1, width, "b")
        self.crn = Reconstructor(2, width, "c")
        self.vsrn_a = Reconstructor(1, width, "a")
        self.vsrn_b = Reconstructor(1, width, "b")
        self.vcrn = Reconstructor(2, width, "c")
        self.metadata = dict(metadata or {})
        self.metadata.setdefault("width", width)

    def role(self, name: str) -> nn.Module:
        return {
            "omega": self.generator,
            "alpha1": self.srn_a,
            "alpha2": self.srn_b,
            "alpha3": self.crn,
            "theta1": self.vsrn_a,
            "theta2": self.vsrn_b,
            "theta3": self.vcrn,
        }[name]

    def alpha(self) -> list[nn.Module]:
        return [self.srn_a, self.srn_b, self.crn]

    def theta(self) -> list[nn.Module]:
        return [self.vsrn_a, self.vsrn_b, self.vcrn]

    def reconstruct(self, a: torch.Tensor, b: torch.Tensor):
        """Side A, side B and central reconstructions from (decoded) descriptions."""
        return self.srn_a(a), self.srn_b(b), self.crn(a, b)

    def virtual(self, a: torch.Tensor, b: torch.Tensor):
        """Virtual-codec outputs from lossless descriptions."""
        return self.vsrn_a(a), self.vsrn_b(b), self.vcrn(a, b)

    def copy_theta_from_alpha(self) -> None:
        for src, dst in zip(self.alpha(), self.theta()):
            dst.load_state_dict(src.state_dict())


def _conv_layers(module: nn.Module) -> list[nn.Module]:
    return [m for m in module.modules() if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))]


def _init_module(module: nn.Module, specs: list[ConvSpec], gen: torch.Generator) -> None:
    layers = _conv_layers(module)
    assert len(layers) == len(specs)
    for layer, spec in zip(layers, specs):
        fan_in = spec.c_in * spec.kernel * spec.kernel
        if spec.kind == "deconv":
            # each output pixel sees about k*k/s^2 taps per input channel
            fan_in = max(1, fan_in // (spec.stride * spec.stride))
        std = math.sqrt(2.0 / fan_in) if spec.activation == "relu" else OUTPUT_GAIN / math.sqrt(fan_in)
        with torch.no_grad():
            layer.weight.normal_(0.0, std, generator=gen)
            layer.bias.zero_()


def _role_specs(bundle: ModelBundle, role: str) -> list[ConvSpec]:
    module = bundle.role(role)
    if isinstance(module, Generator):
        s = module.specs
        return s["fen"] + s["gna"] + s["gnb"]
    return module.specs


def init_params(seed: int = 0, width: int = DEFAULT_WIDTH, dtype=torch.float32) -> ModelBundle:
    """Fresh bundle: zero-mean normal weights scaled by fan-in, zero biases.

    ReLU layers use the He scale ``sqrt(2 / fan_in)``; the linear output
    layers use ``OUTPUT_GAIN / sqrt(fan_in)``.

    Each role draws from its own generator seeded from ``seed`` so roles are
    independent of each other's sizes.
    """
    bundle = ModelBundle(width, metadata={"seed": seed})
    for k, role in enumerate(ROLES):
        gen = torch.Generator().manual_seed(seed * 1000 + k)
        _init_module(bundle.role(role), _role_specs(bundle, role), gen)
    return bundle.to(dtype)


# ---------------------------------------------------------------------------
# checkpoints


def _role_tensors(bundle: ModelBundle, role: str) -> list[dict]:
    out = []
    for idx, layer in enumerate(_conv_layers(bundle.role(role))):
        for kind in ("weight", "bias"):
            t = getattr(layer, kind).detach().cpu().clone()
            out.append({"role": role, "layer": idx, "kind": kind, "shape": list(t.shape), "data": t})
    return out


def save_checkpoint(bundle: ModelBundle, path: str | Path) -> str:
    """Write ``bundle`` to ``path``; returns the SHA-256 of the file.

    Layout (a ``torch.save`` zip archive holding a dict)::

        format_version: int
        metadata: {qf, seed, width, alignment, steps, ...}
        params: {role: [{role, layer, kind, shape, data}, ...]}   for the 7 roles
    """
    meta = dict(bundle.metadata)
    meta["width"] = bundle.width
    meta["alignment"] = dict(DECONV_ALIGNMENT)
    payload = {
        "format_version": FORMAT_VERSION,
        "metadata": meta,
        "params": {role: _role_tensors(bundle, role) for role in ROLES},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> ModelBundle:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path}: not a checkpoint")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {payload['format_version']} is not supported "
            f"(expected {FORMAT_VERSION})"
        )
    meta = dict(payload["metadata"])
    if meta.get("alignment") != DECONV_ALIGNMENT:
        raise CheckpointError(f"{path}: unsupported deconvolution alignment {meta.get('alignment')}")
    params = payload["params"]
    missing = [r for r in ROLES if r not in params]
    if missing:
        raise CheckpointError(f"{path}: missing parameter sets {missing}")
    dtype = params["omega"][0]["data"].dtype
    bundle = ModelBundle(int(meta["width"]), metadata=meta).to(dtype)
    for role in ROLES:
        layers = _conv_layers(bundle.role(role))
        entries = params[role]
        if len(entries) != 2 * len(layers):
            raise CheckpointError(f"{path}: {role} has {len(entries)} tensors, expected {2 * len(layers)}")
        for entry in entries:
            target = getattr(layers[entry["layer"]], entry["kind"])
            if list(target.shape) != list(entry["shape"]) or list(entry["data"].shape) != list(entry["shape"]):
                raise CheckpointError(f"{path}: shape mismatch in {role} layer {entry['layer']}")
            if not torch.isfinite(entry["data"]).all():
                raise CheckpointError(f"{path}: non-finite values in {role} layer {entry['layer']}")
            with torch.no_grad():
                target.copy_(entry["data"])
    return bundle


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
