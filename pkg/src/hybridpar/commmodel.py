"""Closed-form per-GPU communication volumes (in elements) for 2D tensor parallelism.

Only the tensor-parallel all-reduces are counted in ``v_total``; the
data-parallel gradient all-reduce is reported separately as ``v_dp``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from .core import ModelKind, ParallelConfig, validate_config
from .serialize import real_str

UNET_SCALE = Fraction("10.625")
UNET_COL_COEF = Fraction("2.012")
UNET_ROW_COEF = Fraction("1.011")
UNET_OPT_DIVISOR = Fraction("1.98")


class IndivisibleShape(ValueError):
    pass


@dataclass(frozen=True)
class LayerShape:
    k: int
    n: int
    transposed: bool = False
    m: int | None = None

    def __post_init__(self):
        for name in ("k", "n"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.m is not None and self.m < 1:
            raise ValueError("m must be >= 1")

    def to_dict(self) -> dict:
        out = {"k": self.k, "n": self.n, "transposed": self.transposed}
        if self.m is not None:
            out["m"] = self.m
        return out


@dataclass(frozen=True)
class VolumePrediction:
    v_fp: Fraction
    v_bp: Fraction
    v_total: Fraction
    per_layer: list[tuple[LayerShape, Fraction]] = field(default_factory=list)
    v_dp: Fraction = Fraction(0)

    def to_dict(self) -> dict:
        return {
            "v_fp": self.v_fp,
            "v_bp": self.v_bp,
            "v_total": self.v_total,
            "v_dp": self.v_dp,
            "per_layer": [{"shape": s.to_dict(), "elements": v} for s, v in self.per_layer],
        }


def ring_allreduce_volume(buff_sz, p: int) -> Fraction:
    """Per-rank send+receive volume of a bandwidth-optimal ring all-reduce."""
    if p < 1:
        raise ValueError("p must be >= 1")
    return 2 * Fraction(p - 1, p) * Fraction(buff_sz)


def layer_grid(shape: LayerShape, cfg: ParallelConfig) -> tuple[int, int]:
    """(degree splitting k, degree splitting n) for this layer's weight layout."""
    if shape.transposed:
        return cfg.tensor_cols, cfg.tensor_rows
    return cfg.tensor_rows, cfg.tensor_cols


def layer_volume(shape: LayerShape, cfg: ParallelConfig, B: int, strict: bool = True) -> VolumePrediction:
    """Forward/backward all-reduce volume per GPU for one FC layer.

    For a transposed layer the row and column degrees exchange roles: the
    forward all-reduce runs over row GPUs and the backward one over column
    GPUs. With ``strict=False`` divisibility is not enforced (used by the
    planner, which only compares totals).
    """
    validate_config(cfg)
    k_split, n_split = layer_grid(shape, cfg)
    if strict:
        if shape.k % k_split or shape.n % n_split:
            raise IndivisibleShape(
                f"layer {shape.k}x{shape.n} (transposed={shape.transposed}) does not divide"
                f" over {k_split}x{n_split}")
        if B % cfg.data_degree:
            raise IndivisibleShape(f"B={B} not divisible by G_data={cfg.data_degree}")
    rows = Fraction(B, cfg.data_degree)
    v_fp = ring_allreduce_volume(rows * Fraction(shape.n, n_split), k_split)
    v_bp = ring_allreduce_volume(rows * Fraction(shape.k, k_split), n_split)
    local_weights = Fraction(shape.k * shape.n, cfg.tensor_degree)
    v_dp = ring_allreduce_volume(local_weights, cfg.data_degree)
    total = v_fp + v_bp
    return VolumePrediction(v_fp, v_bp, total, [(shape, total)], v_dp)


def layer_volume_closed_form(shape: LayerShape, cfg: ParallelConfig, B: int) -> Fraction:
    """``2B/G * (n (G_r - 1) + k (G_c - 1))`` with roles swapped when transposed."""
    k_split, n_split = layer_grid(shape, cfg)
    G = cfg.data_degree * cfg.tensor_degree
    return Fraction(2 * B, G) * (shape.n * (k_split - 1) + shape.k * (n_split - 1))


def layer_volume_lower_bound(shape: LayerShape, cfg: ParallelConfig, B: int) -> float:
    """AM-GM bound ``2B/G * (2 sqrt(nk G/G_data) - (n + k))`` over all factorizations."""
    G = cfg.data_degree * cfg.tensor_degree
    root = math.sqrt(shape.n * shape.k * G / cfg.data_degree)
    return 2 * B / G * (2 * root - (shape.n + shape.k))


def satisfies_lower_bound(shape: LayerShape, cfg: ParallelConfig, B: int) -> bool:
    """Exact check of the AM-GM bound without square roots.

    ``v >= 2B/G (2 sqrt(nk Gt) - (n+k))`` is equivalent to
    ``(n a + k b)^2 >= 4 n k Gt`` with ``a*b = Gt`` the layer's split degrees.
    """
    k_split, n_split = layer_grid(shape, cfg)
    lhs = shape.n * k_split + shape.k * n_split
    return lhs * lhs >= 4 * shape.n * shape.k * cfg.tensor_degree


def transformer_layers(H: int) -> list[LayerShape]:
    """The four FC layers of one transformer block, with alternating layouts."""
    return [
        LayerShape(k=H, n=3 * H, transposed=False),   # QKV projection
        LayerShape(k=H, n=H, transposed=True),        # attention output
        LayerShape(k=H, n=4 * H, transposed=False),   # MLP up
        LayerShape(k=4 * H, n=H, transposed=True),    # MLP down
    ]


def _sum_layers(preds: list[VolumePrediction]) -> VolumePrediction:
    return VolumePrediction(
        v_fp=sum((p.v_fp for p in preds), Fraction(0)),
        v_bp=sum((p.v_bp for p in preds), Fraction(0)),
        v_total=sum((p.v_total for p in preds), Fraction(0)),
        per_layer=[item for p in preds for item in p.per_layer],
        v_dp=sum((p.v_dp for p in preds), Fraction(0)),
    )


def transformer_volume(H: int, B: int, cfg: ParallelConfig, strict: bool = True) -> VolumePrediction:
    """Per-GPU volume of one transformer block; ``B`` counts token rows."""
    return _sum_layers([layer_volume(s, cfg, B, strict) for s in transformer_layers(H)])


def transformer_closed_form(H: int, B: int, cfg: ParallelConfig) -> Fraction:
    G = cfg.data_degree * cfg.tensor_degree
    return Fraction(8 * B * H, G) * (cfg.tensor_cols - 1 + 3 * (cfg.tensor_rows - 1))


def unet_volume(C: int, B: int, cfg: ParallelConfig) -> VolumePrediction:
    """Whole-network U-Net volume from the fitted coefficient model.

    The fit does not separate forward from backward, so ``v_fp``/``v_bp``
    carry the column and row terms respectively.
    """
    validate_config(cfg)
    G = cfg.data_degree * cfg.tensor_degree
    scale = UNET_SCALE * B * C / G
    col = scale * UNET_COL_COEF * (cfg.tensor_cols - 1)
    row = scale * UNET_ROW_COEF * (cfg.tensor_rows - 1)
    return VolumePrediction(v_fp=col, v_bp=row, v_total=col + row)


def model_volume(kind: ModelKind, size: int, B: int, cfg: ParallelConfig, layers: int = 1,
                 strict: bool = False) -> Fraction:
    """Total tensor-parallel elements per GPU per iteration for a whole model."""
    kind = ModelKind(kind)
    if kind is ModelKind.UNET:
        return unet_volume(size, B, cfg).v_total
    return layers * transformer_volume(size, B, cfg, strict).v_total


@dataclass(frozen=True)
class WeakScalingCurve:
    """``ours = alpha0 + alpha1/sqrt(G)``, ``megatron = beta0 sqrt(G) + beta1/sqrt(G)``.

    ``samples`` are evaluated directly from the per-G closed forms (optimal
    real-valued column degree for ours, ``G_c = G_tensor`` for the Megatron
    limit), not from the coefficients.
    """

    alpha0: float
    alpha1: float
    beta0: float
    beta1: float
    samples: list[tuple[int, float, float]]

    def ours(self, G: float) -> float:
        return self.alpha0 + self.alpha1 / math.sqrt(G)

    def megatron(self, G: float) -> float:
        return self.beta0 * math.sqrt(G) + self.beta1 / math.sqrt(G)

    def to_csv(self) -> str:
        lines = ["G,ours_elements,megatron_elements"]
        for G, ours, meg in self.samples:
            lines.append(f"{G},{real_str(ours)},{real_str(meg)}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "alpha0": self.alpha0, "alpha1": self.alpha1,
            "beta0": self.beta0, "beta1": self.beta1,
            "samples": [{"G": G, "ours_elements": o, "megatron_elements": m}
                        for G, o, m in self.samples],
        }


def weak_scaling_curves(kind: ModelKind, B: int, base_size: float, base_G: int, G_data: int,
                        G_values: list[int]) -> WeakScalingCurve:
    """Volumes under weak scaling with the model width grown as ``sqrt(G)``.

    ``base_size`` is the hidden size (transformer) or channel count (U-Net)
    at ``base_G`` GPUs; ``B`` and ``G_data`` stay fixed.
    """
    kind = ModelKind(kind)
    width_per_root = base_size / math.sqrt(base_G)    # size / sqrt(G), held constant
    samples = []
    if kind is ModelKind.UNET:
        K = float(UNET_SCALE) * B * width_per_root        # 10.625 B C / sqrt(G)
        a, b = float(UNET_COL_COEF), float(UNET_ROW_COEF)
        d = float(UNET_OPT_DIVISOR)
        alpha0 = K * (a / math.sqrt(d) + b * math.sqrt(d)) / math.sqrt(G_data)
        alpha1 = -K * (a + b)
        beta0 = K * a / G_data
        beta1 = -K * a
        for G in G_values:
            Gt = G / G_data
            gc = math.sqrt(Gt / d)
            C = width_per_root * math.sqrt(G)
            scale = float(UNET_SCALE) * B * C / G
            ours = scale * (a * (gc - 1) + b * (Gt / gc - 1))
            meg = scale * a * (Gt - 1)
            samples.append((G, ours, meg))
    else:
        K = 8 * B * width_per_root                        # 8 B H / sqrt(G)
        alpha0 = K * 2 * math.sqrt(3 / G_data)
        alpha1 = -4 * K
        beta0 = K / G_data
        beta1 = -K
        for G in G_values:
            Gt = G / G_data
            gc = math.sqrt(3 * Gt)
            H = width_per_root * math.sqrt(G)
            scale = 8 * B * H / G
            ours = scale * (gc - 1 + 3 * (Gt / gc - 1))
            meg = scale * (Gt - 1)
            samples.append((G, ours, meg))
    return WeakScalingCurve(alpha0, alpha1, beta0, beta1, samples)
