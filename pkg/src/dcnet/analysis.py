"""Post-training analyses: pattern completion, masking, contrast and scale statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import Dataset, batches
from .engine import NonFiniteError, Tensor, no_grad
from .model import block_sigmas, discrete_rhs
from .ode import SolverError, dopri5_integrate
from .srf import SrfConv
from .train import evaluate

CONTRAST_MODES = ("naive", "scaled_T", "scaled_inputs_all_blocks")


@dataclass(frozen=True)
class MaskSpec:
    n: int
    fill: float = 0.0

    def __post_init__(self):
        if not 0 <= self.n <= 32:
            raise ValueError(f"mask size must lie in [0, 32], got {self.n}")


def mask_bounds(size: int, n: int) -> tuple[int, int]:
    """Start and stop of a centred length-``n`` window; odd slack goes to the far side."""
    start = (size - n) // 2
    return start, start + n


def mask_center(images: np.ndarray, spec: MaskSpec) -> np.ndarray:
    """Set the central n x n square of every channel to ``spec.fill``.

    Accepts a single (3, H, W) image or a (B, 3, H, W) batch; returns a copy.
    """
    out = np.array(images, copy=True)
    if spec.n == 0:
        return out
    h, w = out.shape[-2:]
    y0, y1 = mask_bounds(h, spec.n)
    x0, x1 = mask_bounds(w, spec.n)
    out[..., y0:y1, x0:x1] = spec.fill
    return out


@dataclass
class CompletionReport:
    t: np.ndarray
    per_image: np.ndarray  # (images, samples)
    mean: np.ndarray
    std: np.ndarray
    count: int
    untrained: bool = False

    def rows(self) -> list[dict]:
        return [{"t": repr(float(t)), "mean_D": repr(float(m)), "std_D": repr(float(s))} for t, m, s in zip(self.t, self.mean, self.std)]


def feature_distance(h: np.ndarray, h_masked: np.ndarray, amplitude: np.ndarray) -> np.ndarray:
    """Per-image sum of absolute differences divided by the amplitude A."""
    diff = np.abs(h.astype(np.float64) - h_masked.astype(np.float64))
    return diff.reshape(diff.shape[0], -1).sum(axis=1) / amplitude


def _block1_states(model, x: np.ndarray, times: np.ndarray) -> list[np.ndarray]:
    """Block-1 states at each of ``times``, each reached by a fresh integration from t = 0."""
    blk = model.encoder.block1
    with no_grad():
        h0 = model.encoder.lift(Tensor(x))
        out = []
        for t in times:
            if t == 0.0:
                out.append(h0.data.copy())
            elif blk.residual:
                out.append((h0 + discrete_rhs(h0, blk)).data)
            else:
                out.append(dopri5_integrate(blk.vector_field(), h0, 0.0, float(t), blk.solver).final_state.data)
    return out


def pattern_completion(
    model, images: Dataset | np.ndarray, spec: MaskSpec, samples: int = 9, batch: int = 100, untrained: bool = False
) -> CompletionReport:
    """D(t) between intact and masked inputs along the first block's trajectory.

    A is the max absolute value of the intact image's block-1 input state.
    ResNet-style blocks yield two samples (input and output).
    """
    if samples < 2:
        raise ValueError("need at least 2 time samples")
    imgs = images.images if isinstance(images, Dataset) else np.asarray(images)
    blk = model.encoder.block1
    times = np.array([0.0, 1.0]) if blk.residual else np.linspace(0.0, blk.T, samples)
    per_image = []
    for idx in batches(len(imgs), batch, drop_last=False):
        x = imgs[idx]
        intact = _block1_states(model, x, times)
        masked = _block1_states(model, mask_center(x, spec), times)
        amp = np.abs(intact[0].reshape(len(idx), -1)).max(axis=1).astype(np.float64)
        per_image.append(np.stack([feature_distance(a, b, amp) for a, b in zip(intact, masked)], axis=1))
    d = np.concatenate(per_image)
    return CompletionReport(times, d, d.mean(axis=0), d.std(axis=0), d.shape[0], untrained)


def masked_accuracy_sweep(model, test: Dataset, ns, batch: int = 128) -> list[dict]:
    """Accuracy on the same images for each central mask size."""
    rows = []
    for n in ns:
        masked = Dataset(mask_center(test.images, MaskSpec(int(n))), test.labels, test.split)
        ev = evaluate(model, masked, batch)
        rows.append({"n": str(int(n)), "accuracy": repr(ev.accuracy), "images": str(ev.n)})
    return rows


def contrast_forward_kwargs(model, c: float, mode: str) -> tuple[float, dict]:
    """Input multiplier and forward() options realizing contrast ``c`` in ``mode``."""
    if c <= 0:
        raise ValueError(f"contrast must be positive, got {c}")
    if mode == "naive":
        return c, {}
    if mode == "scaled_T":
        return c, {"block_T": (c * model.encoder.block1.T, None, None)}
    if mode == "scaled_inputs_all_blocks":
        return 1.0, {"contrast_block_scale": c}
    raise ValueError(f"unknown contrast mode {mode!r}; choose from {', '.join(CONTRAST_MODES)}")


def contrast_sweep(model, test: Dataset, cs, mode: str = "naive", batch: int = 128) -> list[dict]:
    """Accuracy and mean NFE per contrast value; solver failures are reported per row."""
    rows = []
    for c in cs:
        scale, kw = contrast_forward_kwargs(model, float(c), mode)
        data = test if scale == 1.0 else Dataset((test.images * np.float32(scale)).astype(np.float32), test.labels, test.split)
        row = {"c": repr(float(c)), "mode": mode, "accuracy": "", "nfe_block1": "", "nfe_total": "", "error": ""}
        try:
            ev = evaluate(model, data, batch, **kw)
            row.update(accuracy=repr(ev.accuracy), nfe_block1=repr(float(ev.nfe[0])), nfe_total=repr(float(sum(ev.nfe))))
        except (SolverError, NonFiniteError, FloatingPointError) as exc:
            row["error"] = str(exc).replace(",", ";")
        rows.append(row)
    return rows


@dataclass
class SigmaReport:
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def extract_sigmas(model, times=None) -> SigmaReport:
    """Materialized scales of every SRF convolution in the ODE blocks, with statistics.

    Time-dependent layers are sampled at ``times`` (default 0, T/2, T).
    """
    blocks = model.blocks
    if not any(isinstance(c, SrfConv) for b in blocks for c in (b.conv1, b.conv2)):
        raise ValueError("model has no SRF convolutions in its blocks")
    rep = SigmaReport()
    for bi, blk in enumerate(blocks, 1):
        values = []
        for lname in ("conv1", "conv2"):
            conv = getattr(blk, lname)
            if not isinstance(conv, SrfConv):
                continue
            ts = (times if times is not None else [0.0, blk.T / 2, blk.T]) if conv.time_dependent else [0.0]
            for t in ts:
                sig = np.ravel(conv.sigmas(t))
                values.append(sig)
                for i, v in enumerate(sig):
                    rep.rows.append({"block": str(bi), "layer": lname, "t": repr(float(t)), "index": str(i), "sigma": repr(float(v))})
        allv = np.concatenate(values)
        rep.summary[f"block{bi}"] = {
            "count": int(allv.size),
            "mean": float(np.mean(allv)),
            "median": float(np.median(allv)),
            "skewness": float(stats.skew(allv)) if allv.size > 2 else None,
        }
    return rep


__all__ = [
    "CONTRAST_MODES",
    "MaskSpec",
    "mask_center",
    "CompletionReport",
    "pattern_completion",
    "masked_accuracy_sweep",
    "contrast_sweep",
    "contrast_forward_kwargs",
    "extract_sigmas",
    "SigmaReport",
    "block_sigmas",
]
