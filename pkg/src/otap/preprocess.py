"""Raw quadrant z-stacks to a normalized, co-registered well timelapse.

Per frame: each quadrant's z-stack is collapsed with a Sobel-based focus
projection, the four quadrants are feather-stitched into one image, every
frame's contrast is matched to frame 0 over the central well region, and
frames are aligned to frame 0 by translation-only phase correlation with
parabolic sub-pixel refinement.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .manifest import layout
from .pgm import read_pgm, write_pgm

logger = logging.getLogger(__name__)


@dataclass
class PreprocessConfig:
    focus_window: int = 5  # averaging window for the Sobel focus measure
    majority_window: int = 3  # despeckle window over the argmax map
    region_fraction: float = 0.8  # central-region diameter / frame side
    percentile_clip: tuple[float, float] = (2.0, 98.0)
    peak_threshold: float = 0.03  # phase-correlation confidence floor
    max_frames: int | None = None  # keep only the last N frames if exceeded


@dataclass
class RawFrameSet:
    """One frame's acquisition: 4 quadrant z-stacks plus layout geometry.

    ``images[q][z]`` with quadrants in row-major order TL, TR, BL, BR.
    """

    images: list
    frame_index: int
    overlap: int

    def validate(self) -> None:
        if len(self.images) != 4:
            raise ValueError(f"expected 4 quadrants, got {len(self.images)}")
        shapes = {img.shape for stack in self.images for img in stack}
        if len(shapes) != 1:
            raise ValueError(f"mixed quadrant shapes: {sorted(shapes)}")
        if any(len(stack) < 1 for stack in self.images):
            raise ValueError("each quadrant needs at least one z-slice")


@dataclass
class RegistrationResult:
    """Detected per-frame content displacement relative to frame 0.

    ``offsets[t]`` is the (dx, dy) by which frame t's content appears
    shifted; the correction applied is the negation.  Frame 0 is the
    reference and carries (0, 0).
    """

    offsets: np.ndarray  # (f, 2) float
    flagged: list[int] = field(default_factory=list)
    reference: int = 0


def sobel_focus_magnitude(image: np.ndarray, window: int = 5) -> np.ndarray:
    """Focus measure: 3x3 Sobel gradient magnitude, box-averaged."""
    img = np.asarray(image, dtype=np.float64)
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    if window > 1:
        mag = ndimage.uniform_filter(mag, size=window, mode="nearest")
    return mag


def sobel_focus_project(stack, focus_window: int = 5, majority_window: int = 3) -> np.ndarray:
    """Collapse a z-stack to the per-pixel best-focus slice.

    Each output pixel takes the value of the slice with the largest local
    Sobel focus measure; the argmax map is despeckled with a majority vote
    over ``majority_window``.  Ties resolve to the lowest slice index.
    """
    stack = [np.asarray(s) for s in stack]
    if len(stack) == 0:
        raise ValueError("empty z-stack")
    if len({s.shape for s in stack}) != 1:
        raise ValueError("z-stack slices must share dimensions")
    if len(stack) == 1:
        return stack[0].copy()
    focus = np.stack([sobel_focus_magnitude(s, focus_window) for s in stack])
    zmap = np.argmax(focus, axis=0)
    if majority_window > 1:
        votes = np.stack(
            [
                ndimage.uniform_filter(
                    (zmap == z).astype(np.float64), size=majority_window, mode="nearest"
                )
                for z in range(len(stack))
            ]
        )
        zmap = np.argmax(votes, axis=0)
    arr = np.stack(stack)
    return np.take_along_axis(arr, zmap[None], axis=0)[0]


def stitch_quadrants(frame_set: RawFrameSet, projected=None) -> np.ndarray:
    """Feather-blend four projected quadrants into one frame.

    Quadrants overlap by ``frame_set.overlap`` pixels along the seams; the
    overlap bands are blended with linear ramps that sum to one.  Output
    size is (2*hq - overlap, 2*wq - overlap).
    """
    frame_set.validate()
    o = frame_set.overlap
    if projected is None:
        projected = [sobel_focus_project(stack) for stack in frame_set.images]
    hq, wq = projected[0].shape
    if o > min(hq, wq):
        raise ValueError(f"overlap {o} exceeds quadrant size {hq}x{wq}")
    H, W = 2 * hq - o, 2 * wq - o

    def ramp(n, side):
        w = np.ones(n)
        if o > 0:
            fade = (np.arange(o, 0, -1)) / (o + 1.0)
            if side == "lead":  # fade at the trailing edge
                w[n - o :] = fade
            else:  # fade at the leading edge
                w[:o] = fade[::-1]
        return w

    acc = np.zeros((H, W))
    wsum = np.zeros((H, W))
    placements = [
        (slice(0, hq), slice(0, wq), "lead", "lead"),
        (slice(0, hq), slice(W - wq, W), "lead", "trail"),
        (slice(H - hq, H), slice(0, wq), "trail", "lead"),
        (slice(H - hq, H), slice(W - wq, W), "trail", "trail"),
    ]
    for quad, (ys, xs, vy, vx) in zip(projected, placements):
        wy = ramp(hq, vy)
        wx = ramp(wq, vx)
        w2 = np.outer(wy, wx)
        acc[ys, xs] += np.asarray(quad, dtype=np.float64) * w2
        wsum[ys, xs] += w2
    return acc / wsum


def decompose_into_quadrants(image: np.ndarray, overlap: int):
    """Cut an image into 4 overlapping quadrants (stitch round-trip helper)."""
    H, W = image.shape
    if (H + overlap) % 2 or (W + overlap) % 2:
        raise ValueError("image size + overlap must be even")
    hq, wq = (H + overlap) // 2, (W + overlap) // 2
    return [
        image[:hq, :wq],
        image[:hq, W - wq :],
        image[H - hq :, :wq],
        image[H - hq :, W - wq :],
    ]


def _central_region(shape, fraction):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    r = fraction * min(h, w) / 2.0
    return np.hypot(xx - (w - 1) / 2.0, yy - (h - 1) / 2.0) <= r


def _robust_stats(values, clip):
    lo, hi = np.percentile(values, clip)
    v = np.clip(values, lo, hi)
    return float(v.mean()), float(v.std())


def normalize_contrast(frames, config: PreprocessConfig | None = None):
    """Affinely match every frame's robust mean/std to frame 0's.

    Statistics are taken over the central well region with percentile
    clipping.  A near-zero-variance frame is only mean-shifted and gets a
    degenerate flag.  Returns (frames, per-frame records).
    """
    config = config or PreprocessConfig()
    frames = [np.asarray(fr, dtype=np.float64) for fr in frames]
    if len(frames) < 1:
        raise ValueError("empty timelapse")
    region = _central_region(frames[0].shape, config.region_fraction)
    mu0, sd0 = _robust_stats(frames[0][region], config.percentile_clip)
    out, records = [], []
    for t, fr in enumerate(frames):
        mu, sd = _robust_stats(fr[region], config.percentile_clip)
        if sd < 1e-9:
            logger.warning("frame %d has zero variance; mean-shift only", t)
            res = fr - mu + mu0
            records.append({"scale": 1.0, "shift": mu0 - mu, "degenerate": True})
        else:
            scale = sd0 / sd
            res = (fr - mu) * scale + mu0
            records.append({"scale": scale, "shift": mu0 - scale * mu, "degenerate": False})
        out.append(np.clip(res, 0.0, 255.0))
    return out, records


def phase_correlation(reference: np.ndarray, moving: np.ndarray):
    """Detect the translation of ``moving``'s content relative to
    ``reference`` via normalized cross-power spectrum.

    Returns ((dx, dy), peak) such that moving ≈ reference shifted by
    (dx, dy); ``peak`` in [0, 1] is the correlation confidence.  Sub-pixel
    refinement fits a parabola through the peak's neighbors on each axis.
    """
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(moving, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("frames must share dimensions")
    fa = np.fft.fft2(a - a.mean())
    fb = np.fft.fft2(b - b.mean())
    cross = fa * np.conj(fb)
    denom = np.abs(cross)
    cross /= np.maximum(denom, 1e-12)
    corr = np.real(np.fft.ifft2(cross))
    h, w = corr.shape
    py, px = np.unravel_index(np.argmax(corr), corr.shape)
    peak = float(corr[py, px])

    def refine(idx, axis_len, take):
        c0, c1, c2 = take((idx - 1) % axis_len), take(idx), take((idx + 1) % axis_len)
        denom = c0 - 2 * c1 + c2
        if abs(denom) < 1e-12:
            return 0.0
        return float(np.clip(0.5 * (c0 - c2) / denom, -0.5, 0.5))

    dy = py + refine(py, h, lambda i: corr[i, px])
    dx = px + refine(px, w, lambda i: corr[py, i])
    if dy > h / 2:
        dy -= h
    if dx > w / 2:
        dx -= w
    # corr peaks at the negated displacement of the moving image.
    return (-dx, -dy), peak


def translate(image: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Shift content by (dx, dy) with bilinear sampling, edges replicated."""
    return ndimage.shift(
        np.asarray(image, dtype=np.float64), (dy, dx), order=1, mode="nearest"
    )


def register(frames, config: PreprocessConfig | None = None):
    """Align all frames to frame 0 by translation.

    Frames whose correlation peak falls below the confidence threshold are
    flagged and passed through with an identity offset.
    """
    config = config or PreprocessConfig()
    frames = [np.asarray(fr, dtype=np.float64) for fr in frames]
    if len(frames) < 2:
        raise ValueError("registration needs at least 2 frames")
    offsets = np.zeros((len(frames), 2))
    flagged = []
    out = [frames[0]]
    for t in range(1, len(frames)):
        (dx, dy), peak = phase_correlation(frames[0], frames[t])
        if peak < config.peak_threshold:
            logger.warning("frame %d: correlation peak %.4f below threshold", t, peak)
            flagged.append(t)
            out.append(frames[t])
            continue
        offsets[t] = (dx, dy)
        out.append(translate(frames[t], -dx, -dy))
    return out, RegistrationResult(offsets=offsets, flagged=flagged)


def preprocess_frames(frame_sets, config: PreprocessConfig | None = None):
    """Full per-well pipeline: project, stitch, normalize, register."""
    config = config or PreprocessConfig()
    if config.max_frames is not None and len(frame_sets) > config.max_frames:
        frame_sets = frame_sets[-config.max_frames :]
    stitched = [stitch_quadrants(fs) for fs in frame_sets]
    normalized, contrast_records = normalize_contrast(stitched, config)
    registered, reg = register(normalized, config)
    return registered, reg, contrast_records


def load_raw_well(root, well_id: str, frames: int, z_levels: int, overlap: int):
    """Read a well's raw quadrant tree into RawFrameSets."""
    frame_sets = []
    for t in range(frames):
        quads = []
        for q in range(4):
            stack = []
            for z in range(z_levels):
                path = layout.raw_quadrant(root, well_id, t, q, z)
                if not path.is_file():
                    raise FileNotFoundError(f"missing raw image {path}")
                stack.append(read_pgm(path))
            quads.append(stack)
        frame_sets.append(RawFrameSet(images=quads, frame_index=t, overlap=overlap))
    return frame_sets


def preprocess_well(root, well_id: str, frames: int, z_levels: int, overlap: int,
                    config: PreprocessConfig | None = None, out_root=None) -> Path:
    """Preprocess one well from the raw tree and write results.

    Writes ``preprocessed/<well>/frame_<t>.pgm`` and ``registration.json``
    under ``out_root`` (defaults to the dataset root).
    """
    out_root = Path(out_root) if out_root is not None else Path(root)
    frame_sets = load_raw_well(root, well_id, frames, z_levels, overlap)
    registered, reg, contrast_records = preprocess_frames(frame_sets, config)
    out_dir = layout.preprocessed_dir(out_root, well_id)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t, fr in enumerate(registered):
        write_pgm(out_dir / f"frame_{t:03d}.pgm", fr)
    (out_dir / "registration.json").write_text(
        json.dumps(
            {
                "reference": reg.reference,
                "offsets": reg.offsets.tolist(),
                "flagged": reg.flagged,
                "contrast": contrast_records,
            }
        )
    )
    return out_dir


def load_preprocessed(root, well_id: str, frames: int):
    """Read a well's preprocessed timelapse as a (f, H, W) float array."""
    out_dir = layout.preprocessed_dir(root, well_id)
    stack = []
    for t in range(frames):
        path = out_dir / f"frame_{t:03d}.pgm"
        if not path.is_file():
            raise FileNotFoundError(f"missing preprocessed frame {path}")
        stack.append(read_pgm(path).astype(np.float64))
    return np.stack(stack)
