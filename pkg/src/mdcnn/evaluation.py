"""Rate-distortion evaluation, the poly-phase baseline, and a two-channel
erasure simulator."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import codec
from .imaging import ImageFormatError, SsimConfig, polyphase_split, psnr, ssim, to_uint8, upsample_linear
from .networks import ModelBundle

__all__ = [
    "RDPoint",
    "PipelineOutput",
    "ChannelScenario",
    "ChannelReport",
    "CSV_HEADER",
    "run_pipeline",
    "reconstruct_from_decoded",
    "evaluate_model",
    "evaluate_ours_base",
    "summarize",
    "format_report",
    "select_decoder",
    "outcome_probabilities",
    "simulate_channels",
    "export_rd",
    "read_rd",
    "rd_series",
    "plot_rd",
    "OURS_QF",
    "BASE_QF",
]

OURS_QF = (2, 6, 10, 20, 40)
BASE_QF = (2, 3, 4, 10, 50)
CSV_HEADER = [
    "method", "image", "qf", "bpp_side", "bpp_central",
    "psnr_side", "ssim_side", "psnr_central", "ssim_central",
]


@dataclass
class RDPoint:
    qf: int
    bpp_side: float
    bpp_central: float
    psnr_side: float
    ssim_side: float
    psnr_central: float
    ssim_central: float
    method: str = "ours"
    image: str = ""
    # per-description detail, not part of the CSV
    bpp_a: float = math.nan
    bpp_b: float = math.nan
    psnr_a: float = math.nan
    psnr_b: float = math.nan
    ssim_a: float = math.nan
    ssim_b: float = math.nan

    def csv_row(self) -> list[str]:
        return [
            self.method, self.image, str(self.qf),
            *(f"{getattr(self, k):.6f}" for k in CSV_HEADER[3:]),
        ]


@dataclass
class PipelineOutput:
    """Everything one image produces on its way through the codec chain.

    Reconstructions are 8-bit quantized and mapped back to ``[0, 1]``, i.e.
    exactly what a decoder would write to disk.
    """

    image: np.ndarray
    descriptions: tuple[np.ndarray, np.ndarray]
    streams: tuple[codec.Bitstream, codec.Bitstream]
    decoded: tuple[np.ndarray, np.ndarray]
    side_a: np.ndarray
    side_b: np.ndarray
    central: np.ndarray


def _param_dtype(bundle: ModelBundle):
    return next(bundle.parameters()).dtype


def _finalize(t: torch.Tensor) -> np.ndarray:
    return to_uint8(t.clamp(0, 1)).astype(np.float64) / 255.0


@torch.no_grad()
def describe(bundle: ModelBundle | None, image: np.ndarray, descriptions: str = "mdgn"):
    """Lossless descriptions (clamped to ``[0, 1]``) of an even-sized image."""
    if descriptions == "polyphase":
        pair = polyphase_split(np.asarray(image, dtype=np.float64))
        return pair.a.copy(), pair.b.copy()
    if descriptions != "mdgn":
        raise ValueError(f"unknown description source {descriptions!r}")
    x = torch.as_tensor(np.asarray(image), dtype=_param_dtype(bundle))
    a, b = bundle.generator(x)
    return a.clamp(0, 1).double().numpy(), b.clamp(0, 1).double().numpy()


@torch.no_grad()
def reconstruct_from_decoded(bundle: ModelBundle, dec_a=None, dec_b=None, mode: str = "central") -> np.ndarray:
    """Full-resolution reconstruction for whichever descriptions arrived."""
    dtype = _param_dtype(bundle)
    ta = None if dec_a is None else torch.as_tensor(np.asarray(dec_a), dtype=dtype)
    tb = None if dec_b is None else torch.as_tensor(np.asarray(dec_b), dtype=dtype)
    if mode == "sideA":
        if ta is None:
            raise ValueError("side A reconstruction needs description A")
        return _finalize(bundle.srn_a(ta))
    if mode == "sideB":
        if tb is None:
            raise ValueError("side B reconstruction needs description B")
        return _finalize(bundle.srn_b(tb))
    if mode == "central":
        if ta is None or tb is None:
            raise ValueError("central reconstruction needs both descriptions")
        return _finalize(bundle.crn(ta, tb))
    raise ValueError(f"unknown mode {mode!r}")


def run_pipeline(bundle: ModelBundle, image: np.ndarray, qf: int, descriptions: str = "mdgn") -> PipelineOutput:
    """Describe, JPEG-code both descriptions, and reconstruct side/central images."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] % 2 or image.shape[1] % 2:
        raise ImageFormatError(f"test images must be 2-D with even dimensions, got {image.shape}")
    cfg = codec.CodecConfig(qf)
    a, b = describe(bundle, image, descriptions)
    sa, sb = codec.encode(a, cfg), codec.encode(b, cfg)
    da, db = codec.decode(sa), codec.decode(sb)
    return PipelineOutput(
        image=image,
        descriptions=(a, b),
        streams=(sa, sb),
        decoded=(da, db),
        side_a=reconstruct_from_decoded(bundle, da, None, "sideA"),
        side_b=reconstruct_from_decoded(bundle, None, db, "sideB"),
        central=reconstruct_from_decoded(bundle, da, db, "central"),
    )


def _rd_point(out: PipelineOutput, qf: int, method: str, name: str, ssim_cfg: SsimConfig) -> RDPoint:
    h, w = out.image.shape
    bpp_a = codec.bits_per_pixel([out.streams[0]], h, w)
    bpp_b = codec.bits_per_pixel([out.streams[1]], h, w)
    pa, pb = psnr(out.side_a, out.image), psnr(out.side_b, out.image)
    qa, qb = ssim(out.side_a, out.image, ssim_cfg), ssim(out.side_b, out.image, ssim_cfg)
    return RDPoint(
        qf=qf,
        bpp_side=(bpp_a + bpp_b) / 2,
        bpp_central=codec.bits_per_pixel(list(out.streams), h, w),
        psnr_side=(pa + pb) / 2,
        ssim_side=(qa + qb) / 2,
        psnr_central=psnr(out.central, out.image),
        ssim_central=ssim(out.central, out.image, ssim_cfg),
        method=method,
        image=name,
        bpp_a=bpp_a, bpp_b=bpp_b, psnr_a=pa, psnr_b=pb, ssim_a=qa, ssim_b=qb,
    )


def _named(images) -> list[tuple[str, np.ndarray]]:
    if isinstance(images, Mapping):
        return list(images.items())
    return [(f"image{i:03d}", img) for i, img in enumerate(images)]


def _evaluate(bundle, images, qf_list, method, descriptions, jobs, ssim_cfg) -> list[RDPoint]:
    qf_list = [int(q) for q in qf_list]
    for q in qf_list:
        codec.CodecConfig(q)
    named = _named(images)
    if not named:
        raise ValueError("no test images")

    def bundle_for(qf):
        return bundle[qf] if isinstance(bundle, Mapping) else bundle

    def one(item):
        name, img = item
        return [
            _rd_point(run_pipeline(bundle_for(q), img, q, descriptions), q, method, name, ssim_cfg)
            for q in qf_list
        ]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, named))
    else:
        rows = [one(item) for item in named]
    return [p for row in rows for p in row]


def evaluate_model(bundle, test_images, qf_list=OURS_QF, method: str = "ours", jobs: int = 1,
                   ssim_cfg: SsimConfig = SsimConfig()) -> list[RDPoint]:
    """Per-image RD points of the generator + codec + reconstruction chain.

    ``bundle`` may be a single bundle or a mapping ``qf -> bundle``;
    ``test_images`` a list of arrays or a mapping ``name -> array``.
    """
    return _evaluate(bundle, test_images, qf_list, method, "mdgn", jobs, ssim_cfg)


def evaluate_ours_base(bundle, test_images, qf_list=BASE_QF, method: str = "ours-base", jobs: int = 1,
                       ssim_cfg: SsimConfig = SsimConfig()) -> list[RDPoint]:
    """Same chain with poly-phase descriptions instead of the generator."""
    return _evaluate(bundle, test_images, qf_list, method, "polyphase", jobs, ssim_cfg)


def summarize(points: Sequence[RDPoint]) -> list[RDPoint]:
    """Corpus means per (method, qf), labelled ``image="mean"``."""
    groups: dict[tuple[str, int], list[RDPoint]] = {}
    for p in points:
        groups.setdefault((p.method, p.qf), []).append(p)
    out = []
    for (method, qf), ps in sorted(groups.items()):
        mean = {k: float(np.mean([getattr(p, k) for p in ps])) for k in CSV_HEADER[3:]}
        extra = {k: float(np.mean([getattr(p, k) for p in ps]))
                 for k in ("bpp_a", "bpp_b", "psnr_a", "psnr_b", "ssim_a", "ssim_b")}
        out.append(RDPoint(qf=qf, method=method, image="mean", **mean, **extra))
    return out


def format_report(p: RDPoint) -> str:
    """``PSNR/SSIM/bpp(s) and PSNR/SSIM/bpp(c)`` with three decimals."""
    return (
        f"{p.psnr_side:.3f}/{p.ssim_side:.3f}/{p.bpp_side:.3f}(s) and "
        f"{p.psnr_central:.3f}/{p.ssim_central:.3f}/{p.bpp_central:.3f}(c)"
    )


def bilinear_reference(out: PipelineOutput) -> tuple[float, float]:
    """PSNR of the plainly up-sampled decoded descriptions (A, B)."""
    return tuple(psnr(_finalize(torch.as_tensor(upsample_linear(d))), out.image) for d in out.decoded)


# ---------------------------------------------------------------------------
# channel simulation

OUTCOMES = ("central", "sideA", "sideB", "none")


@dataclass(frozen=True)
class ChannelScenario:
    p_loss_a: float = 0.0
    p_loss_b: float = 0.0
    trials: int = 100_000
    seed: int = 0

    def __post_init__(self):
        for p in (self.p_loss_a, self.p_loss_b):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"loss probability {p} outside [0, 1]")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass
class ChannelReport:
    """Quality the receiver can expect under independent channel losses.

    ``expected_*`` are averages over the trials in which at least one
    description arrived; ``weighted_*`` are the same sums without that
    normalisation (the lost mass contributes nothing).  ``outage`` is the
    fraction of trials with no description.
    """

    method: str
    frequencies: dict[str, float]
    psnr: dict[str, float]
    ssim: dict[str, float]
    weighted_psnr: float
    weighted_ssim: float
    expected_psnr: float
    expected_ssim: float
    outage: float
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "frequencies": self.frequencies,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "weighted_psnr": self.weighted_psnr,
            "weighted_ssim": self.weighted_ssim,
            "expected_psnr": self.expected_psnr,
            "expected_ssim": self.expected_ssim,
            "outage": self.outage,
            **self.details,
        }


def select_decoder(received_a: bool, received_b: bool) -> str | None:
    """Which reconstruction network a receiver runs for a channel outcome."""
    if received_a and received_b:
        return "central"
    if received_a:
        return "sideA"
    if received_b:
        return "sideB"
    return None


def outcome_probabilities(p_loss_a: float, p_loss_b: float) -> dict[str, float]:
    qa, qb = 1.0 - p_loss_a, 1.0 - p_loss_b
    return {
        "central": qa * qb,
        "sideA": qa * p_loss_b,
        "sideB": p_loss_a * qb,
        "none": p_loss_a * p_loss_b,
    }


def _weighted(freqs: dict[str, float], values: dict[str, float]) -> tuple[float, float]:
    weighted = sum(freqs[o] * values[o] for o in ("central", "sideA", "sideB") if freqs[o] > 0)
    received = 1.0 - freqs["none"]
    expected = weighted / received if received > 0 else math.nan
    return weighted, expected


def simulate_channels(
    bundle: ModelBundle,
    image: np.ndarray,
    qf: int,
    scenario: ChannelScenario,
    method: str = "monte_carlo",
    descriptions: str = "mdgn",
    ssim_cfg: SsimConfig = SsimConfig(),
) -> ChannelReport:
    """Expected reconstruction quality over two independently failing channels.

    ``method="monte_carlo"`` draws ``scenario.trials`` loss patterns;
    ``method="exact"`` enumerates the four outcomes with their probabilities.
    """
    out = run_pipeline(bundle, image, qf, descriptions)
    recon = {"central": out.central, "sideA": out.side_a, "sideB": out.side_b}
    q_psnr = {k: psnr(v, out.image) for k, v in recon.items()}
    q_ssim = {k: ssim(v, out.image, ssim_cfg) for k, v in recon.items()}

    if method == "exact":
        freqs = outcome_probabilities(scenario.p_loss_a, scenario.p_loss_b)
    elif method == "monte_carlo":
        rng = np.random.default_rng(scenario.seed)
        lost_a = rng.random(scenario.trials) < scenario.p_loss_a
        lost_b = rng.random(scenario.trials) < scenario.p_loss_b
        counts = dict.fromkeys(OUTCOMES, 0)
        counts["central"] = int(np.sum(~lost_a & ~lost_b))
        counts["sideA"] = int(np.sum(~lost_a & lost_b))
        counts["sideB"] = int(np.sum(lost_a & ~lost_b))
        counts["none"] = int(np.sum(lost_a & lost_b))
        freqs = {k: v / scenario.trials for k, v in counts.items()}
    else:
        raise ValueError(f"unknown method {method!r}")

    wp, ep = _weighted(freqs, q_psnr)
    ws, es = _weighted(freqs, q_ssim)
    return ChannelReport(
        method=method,
        frequencies=freqs,
        psnr=q_psnr,
        ssim=q_ssim,
        weighted_psnr=wp,
        weighted_ssim=ws,
        expected_psnr=ep,
        expected_ssim=es,
        outage=freqs["none"],
        details={"qf": qf, "p_loss_a": scenario.p_loss_a, "p_loss_b": scenario.p_loss_b,
                 "trials": scenario.trials, "seed": scenario.seed},
    )


# ---------------------------------------------------------------------------
# export


def _sort_key(p: RDPoint):
    return (p.method, p.image, p.qf)


def export_rd(points: Sequence[RDPoint], path: str | Path) -> Path:
    """Write RD rows as CSV (sorted by method, image, qf; 6 decimals)."""
    if not points:
        raise ValueError("no RD points to export")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for p in sorted(points, key=_sort_key):
            writer.writerow(p.csv_row())
    return path


def read_rd(path: str | Path) -> list[RDPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
        return [
            RDPoint(
                qf=int(row["qf"]),
                method=row["method"],
                image=row["image"],
                **{k: float(row[k]) for k in CSV_HEADER[3:]},
            )
            for row in reader
        ]


PANELS = {
    "psnr_side": ("bpp_side", "PSNR (dB), side"),
    "psnr_central": ("bpp_central", "PSNR (dB), central"),
    "ssim_side": ("bpp_side", "SSIM, side"),
    "ssim_central": ("bpp_central", "SSIM, central"),
}


def rd_series(points: Sequence[RDPoint], metric: str) -> dict[str, tuple[list[float], list[float]]]:
    """``label -> (x, y)`` for one panel, keeping the input order of the points."""
    xkey = PANELS[metric][0]
    series: dict[str, tuple[list[float], list[float]]] = {}
    for p in points:
        label = p.method if p.image in ("", "mean") else f"{p.method} ({p.image})"
        xs, ys = series.setdefault(label, ([], []))
        xs.append(getattr(p, xkey))
        ys.append(getattr(p, metric))
    return series


def plot_rd(points: Sequence[RDPoint], out_dir: str | Path, fmt: str = "png") -> list[Path]:
    """One figure per panel (side/central x PSNR/SSIM), bpp on the x axis."""
    if not points:
        raise ValueError("no RD points to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for metric, (xkey, ylabel) in PANELS.items():
        fig, ax = plt.subplots(figsize=(5, 4))
        for label, (xs, ys) in rd_series(points, metric).items():
            ax.plot(xs, ys, marker="o", label=label)
        ax.set_xlabel("bpp")
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize="small")
        fig.tight_layout()
        path = out_dir / f"{metric}.{fmt}"
        fig.savefig(path, metadata={"Software": None} if fmt == "png" else None)
        plt.close(fig)
        paths.append(path)
    return paths
