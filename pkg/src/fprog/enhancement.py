"""Map-coincidence enhancement: mask sums, softmax coefficients, feedback loops.

A mask of size m tiles the activation plane with stride m (no overlap). Each
tile's volume, summed through every map, yields one coefficient; coefficients
are normalized to sum to one and multiply every activation inside their tile.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import MASK_SIZES, LayerSpec


@dataclass(frozen=True)
class EnhancementMatrix:
    mask_size: int
    coefficients: np.ndarray
    use_magnitude: bool = True

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.coefficients.shape

    def expand(self, hw: tuple[int, int]) -> np.ndarray:
        """Per-pixel coefficient plane of shape (H, W)."""
        h, w = hw
        m = self.mask_size
        if self.grid_shape != (-(-h // m), -(-w // m)):
            raise ValueError(f"grid {self.grid_shape} does not tile a {h}x{w} plane with mask {m}")
        return np.repeat(np.repeat(self.coefficients, m, axis=0), m, axis=1)[:h, :w]


@dataclass(frozen=True)
class FeedbackLink:
    shallow: int
    deep: int
    iterations: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")


def _check_mask(m: int) -> None:
    if m not in MASK_SIZES:
        raise ValueError(f"mask size must be one of {MASK_SIZES}, got {m}")


def coincidence_sums(activations: np.ndarray, mask_size: int, use_magnitude: bool = True) -> np.ndarray:
    """Sum of activations (or magnitudes) over each m x m x N_map tile.

    Edge tiles of planes not divisible by m cover only the remaining pixels.
    """
    _check_mask(mask_size)
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"expected (H, W, C) activations, got shape {a.shape}")
    if use_magnitude:
        a = np.abs(a)
    h, w, _ = a.shape
    per_pixel = a.sum(axis=2)
    rows = np.add.reduceat(per_pixel, np.arange(0, h, mask_size), axis=0)
    return np.add.reduceat(rows, np.arange(0, w, mask_size), axis=1)


def normalize(raw: np.ndarray, mask_size: int | None = None, method: str = "softmax", use_magnitude: bool = True) -> EnhancementMatrix:
    """Turn a raw coincidence grid into coefficients summing to one.

    ``method="softmax"`` exponentiates first; ``"linear"`` divides by the sum
    (uniform when the grid is all zero).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("empty coincidence grid")
    if method == "softmax":
        e = np.exp(raw - raw.max())
        coeffs = e / e.sum()
    elif method == "linear":
        total = raw.sum()
        coeffs = raw / total if total > 0 else np.full(raw.shape, 1.0 / raw.size)
    else:
        raise ValueError(f"unknown normalization {method!r}")
    return EnhancementMatrix(mask_size if mask_size is not None else 1, coeffs, use_magnitude)


def compute_matrix(
    activations: np.ndarray, mask_size: int, use_magnitude: bool = True, method: str = "softmax"
) -> EnhancementMatrix:
    m = normalize(coincidence_sums(activations, mask_size, use_magnitude), mask_size, method, use_magnitude)
    return m


def apply(activations: np.ndarray, matrix: EnhancementMatrix) -> np.ndarray:
    """Scale each tile volume by its coefficient."""
    a = np.asarray(activations, dtype=np.float64)
    return a * matrix.expand(a.shape[:2])[..., None]


def apply_with_dropout(
    activations: np.ndarray, matrix: EnhancementMatrix, keep_mask: np.ndarray, p: float
) -> np.ndarray:
    """Dropout mask, then enhancement, then one division by the keep probability."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    a = np.asarray(activations, dtype=np.float64) * keep_mask
    return apply(a, matrix) / (1.0 - p)


def sweep_apply(activations: np.ndarray, matrix: EnhancementMatrix) -> tuple[np.ndarray, int]:
    """Pixel-array realization: shift each pixel's 1D map stack past the
    coefficient unit, one pixel per pulse. Returns (result, pulses)."""
    a = np.asarray(activations, dtype=np.float64)
    h, w, _ = a.shape
    m = matrix.mask_size
    if matrix.grid_shape != (-(-h // m), -(-w // m)):
        raise ValueError(f"grid {matrix.grid_shape} does not tile a {h}x{w} plane with mask {m}")
    out = np.empty_like(a)
    pulses = 0
    for y in range(h):
        for x in range(w):
            out[y, x] = a[y, x] * matrix.coefficients[y // m, x // m]
            pulses += 1
    return out, pulses


def combine(original: EnhancementMatrix, feedback: EnhancementMatrix, renormalize: str = "linear") -> EnhancementMatrix:
    """Element-wise product of shallow and deep coefficients, renormalized.

    ``renormalize`` is ``"linear"`` (divide by the new sum), ``"softmax"`` or
    ``"none"``.
    """
    if original.grid_shape != feedback.grid_shape:
        raise ValueError(f"coefficient grids differ: {original.grid_shape} vs {feedback.grid_shape}")
    prod = original.coefficients * feedback.coefficients
    if renormalize == "linear":
        total = prod.sum()
        prod = prod / total if total > 0 else np.full(prod.shape, 1.0 / prod.size)
    elif renormalize == "softmax":
        e = np.exp(prod - prod.max())
        prod = e / e.sum()
    elif renormalize != "none":
        raise ValueError(f"unknown renormalization {renormalize!r}")
    return EnhancementMatrix(original.mask_size, prod, original.use_magnitude)


@dataclass
class FeedbackResult:
    output: np.ndarray
    shallow_original: EnhancementMatrix
    shallow_combined: EnhancementMatrix
    deep_first: EnhancementMatrix
    deep_final: EnhancementMatrix
    history: list = field(default_factory=list)
    pulses: int = 0


def single_loop_feedback(
    link: FeedbackLink,
    shallow_output: np.ndarray,
    propagate: Callable[[np.ndarray], np.ndarray],
    mask_size: int,
    use_magnitude: bool = True,
    method: str = "softmax",
    renormalize: str = "linear",
) -> FeedbackResult:
    """Run the shallow/deep enhancement loop.

    ``shallow_output`` is the raw output of the shallow convolution (before any
    pooling); ``propagate`` maps enhanced shallow activations to the deep
    convolution's raw output. The deep output after the final loop is returned.
    """
    _check_mask(mask_size)
    a_l = np.asarray(shallow_output, dtype=np.float64)
    orig = compute_matrix(a_l, mask_size, use_magnitude, method)
    enhanced, pulses = sweep_apply(a_l, orig)
    a_k = np.asarray(propagate(enhanced), dtype=np.float64)
    if a_k.shape[:2] != a_l.shape[:2]:
        raise ValueError(f"linked layers need equal height/width, got {a_l.shape[:2]} and {a_k.shape[:2]}")
    deep = compute_matrix(a_k, mask_size, use_magnitude, method)
    deep_first = deep
    combined = orig
    history = []
    for _ in range(link.iterations):
        combined = combine(orig, deep, renormalize)
        history.append(combined)
        enhanced, p = sweep_apply(a_l, combined)
        pulses += p
        a_k = np.asarray(propagate(enhanced), dtype=np.float64)
        deep = compute_matrix(a_k, mask_size, use_magnitude, method)
    out, p = sweep_apply(a_k, deep)
    pulses += p
    return FeedbackResult(out, orig, combined, deep_first, deep, history, pulses)


def inception_forward(
    module: LayerSpec,
    x: np.ndarray,
    params: dict,
    enhancement: LayerSpec | None = None,
) -> np.ndarray:
    """Channel-wise concatenation of the branch outputs, optionally enhanced
    over the concatenated stack."""
    from .numerics import _layer_forward

    if module.kind != "InceptionModule":
        raise ValueError("not an InceptionModule")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    outs = []
    for chain, ps in zip(module.branches, params["branches"]):
        h = xb
        for b, bp in zip(chain, ps):
            _, h, _ = _layer_forward(b, bp, h)
        outs.append(h)
    hw = {o.shape[1:3] for o in outs}
    if len(hw) != 1:
        raise ValueError(f"branch outputs disagree on height/width: {sorted(hw)}")
    out = np.concatenate(outs, axis=-1)
    if enhancement is not None:
        out = np.stack(
            [apply(o, compute_matrix(o, enhancement.mask_size, enhancement.use_magnitude)) for o in out]
        )
    return out[0] if single else out


# -- fixtures ------------------------------------------------------------------------


def two_blob_fixture(size: int = 9, maps: int = 4, mask_size: int = 3, energy: float = 1.0):
    """Shallow activations with one co-active blob and one isolated single-map blob.

    Returns ``(shallow, propagate, aligned_cell, isolated_cell)``. The deep layer
    responds only where at least two shallow maps are active together, so it is
    aligned with the co-active blob.
    """
    a = np.zeros((size, size, maps))
    m = mask_size
    aligned = (0, 0)
    isolated = ((size - 1) // m, (size - 1) // m)
    # co-active: two maps, `energy` per map
    a[0:m, 0:m, 0] = energy / (m * m)
    a[0:m, 0:m, 1] = energy / (m * m)
    # isolated: one map, same per-map energy
    ys, xs = isolated[0] * m, isolated[1] * m
    a[ys : ys + m, xs : xs + m, 2] = energy / (m * m)

    def propagate(x: np.ndarray) -> np.ndarray:
        active = (x > 0).sum(axis=2)
        co = np.where(active >= 2, x.sum(axis=2), 0.0)
        return np.stack([co, 0.5 * co], axis=2)

    return a, propagate, aligned, isolated
