"""Well/cavity detection and prompt-propagated organoid segmentation.

A :class:`PromptableSegmenter` produces up to ``max_candidates`` scored
masks from a point prompt.  The built-in backend grows regions from the
prompt at three intensity-tolerance levels and scores each candidate by
its boundary gradient strength; an external executable can be plugged in
through a small stdin/stdout protocol (see :class:`ExternalSegmenter`).

Cavities are detected once per well from unprompted proposals, filtered
by containment in the well, circularity, and area.  Organoid tracking
runs backward from the last frame: the prompt for frame t is an
exponentially weighted average of the chosen-mask centroids of frames
t+1..t+10, and among the candidates the one with the highest Dice overlap
against the next frame's mask wins.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.feature import canny
from skimage.segmentation import flood

from .pgm import read_mask, write_pgm
from .manifest import layout


class WellNotFoundError(RuntimeError):
    pass


@dataclass(frozen=True)
class SegmenterCapabilities:
    max_candidates: int = 3
    supports_point_prompts: bool = True
    supports_proposals: bool = True


@dataclass
class SegmentConfig:
    circularity_threshold: float = 0.8
    area_band: tuple[float, float] = (0.25, 1.5)  # x nominal cavity area
    nominal_cavity_diameter: float = 26.0
    crop_pad: int = 6
    detection_frame: int = 0
    ewa_window: int = 10
    ewa_decay: float = 0.7
    prompt_source: str = "centroid"  # "centroid" | "raw"
    min_component_area: int = 12
    canny_sigma: float = 1.5
    canny_low: float = 4.0
    canny_high: float = 8.0
    max_flagged_fraction: float = 0.2

    def nominal_area(self) -> float:
        return np.pi * (self.nominal_cavity_diameter / 2.0) ** 2


class PromptableSegmenter:
    """Interface for point-promptable mask generators."""

    capabilities = SegmenterCapabilities()

    def segment_at(self, image, prompt, n_candidates: int = 3):
        """Return 1..n_candidates (mask, score) pairs, scores in [0, 1],
        ordered by score descending; every mask contains the prompt."""
        raise NotImplementedError

    def propose(self, image):
        """Unprompted proposal mode: scored masks covering salient regions."""
        raise NotImplementedError


def _gradient_magnitude(image):
    gx = ndimage.sobel(image, axis=1, mode="nearest")
    gy = ndimage.sobel(image, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def _boundary(mask):
    return mask & ~ndimage.binary_erosion(mask, structure=CROSS, border_value=0)


CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class BuiltinSegmenter(PromptableSegmenter):
    """Seeded region growing at three intensity-tolerance levels.

    Growth from the prompt accepts pixels within ``tolerances[m] * robust
    intensity span`` of the seed's local median.  A region swallowing
    nearly the whole image means no boundary was found; the candidate
    degenerates to a small disk around the prompt.  Score is the mean
    gradient magnitude along the candidate boundary, normalized by the
    image's maximum gradient.
    """

    def __init__(self, tolerances=(0.15, 0.30, 0.50), coverage_cap=0.9, grid_stride=8):
        self.tolerances = tuple(tolerances)
        self.coverage_cap = coverage_cap
        self.grid_stride = grid_stride
        self.capabilities = SegmenterCapabilities(
            max_candidates=len(self.tolerances),
            supports_point_prompts=True,
            supports_proposals=True,
        )

    def _span(self, image):
        lo, hi = np.percentile(image, (1.0, 99.0))
        return max(float(hi - lo), 1e-9)

    def _grow(self, image, patched, span, grad, gmax, r, c, level):
        tol = self.tolerances[level] * span
        mask = flood(patched, (r, c), tolerance=tol)
        if mask.mean() > self.coverage_cap:
            # No boundary reachable: degenerate small neighborhood.
            h, w = image.shape
            yy, xx = np.mgrid[0:h, 0:w]
            mask = np.hypot(xx - c, yy - r) <= 2 + 3 * level
        boundary = _boundary(mask)
        if boundary.any() and gmax > 1e-9:
            score = float(np.clip(grad[boundary].mean() / gmax, 0.0, 1.0))
        else:
            score = 0.0
        return mask, score

    def _prepare(self, image):
        img = np.asarray(image, dtype=np.float64)
        grad = _gradient_magnitude(img)
        return img, self._span(img), grad, float(grad.max())

    def segment_at(self, image, prompt, n_candidates: int = 3):
        img, span, grad, gmax = self._prepare(image)
        h, w = img.shape
        x, y = float(prompt[0]), float(prompt[1])
        r, c = int(round(y)), int(round(x))
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"prompt ({x}, {y}) outside image {w}x{h}")
        patched = img.copy()
        patched[r, c] = np.median(img[max(0, r - 1) : r + 2, max(0, c - 1) : c + 2])
        n = min(n_candidates, len(self.tolerances))
        cands = [self._grow(img, patched, span, grad, gmax, r, c, m) for m in range(n)]
        cands.sort(key=lambda ms: -ms[1])
        return cands

    def propose(self, image):
        """Grid-prompted proposals; one flood per uncovered seed per level.

        Thin-shell candidates (flooded rings around unreachable cores) are
        unreliable and dropped.
        """
        img, span, grad, gmax = self._prepare(image)
        h, w = img.shape
        proposals = []
        seen = set()
        for m in range(len(self.tolerances)):
            claimed = np.zeros((h, w), dtype=bool)
            for r in range(self.grid_stride // 2, h, self.grid_stride):
                for c in range(self.grid_stride // 2, w, self.grid_stride):
                    if claimed[r, c]:
                        continue
                    patched = img.copy()
                    patched[r, c] = np.median(
                        img[max(0, r - 1) : r + 2, max(0, c - 1) : c + 2]
                    )
                    mask, score = self._grow(img, patched, span, grad, gmax, r, c, m)
                    claimed |= mask
                    filled = ndimage.binary_fill_holes(mask)
                    hole_fraction = 1.0 - mask.sum() / max(filled.sum(), 1)
                    if hole_fraction > 0.35:
                        continue
                    key = mask.tobytes()
                    if key in seen:
                        continue
                    seen.add(key)
                    proposals.append((mask, score))
        return proposals


class ExternalSegmenter(PromptableSegmenter):
    """Adapter running an external executable per segmentation call.

    Protocol (stdin/stdout, binary):
      request:  ``SEGREQ <x> <y> <n>\\n`` followed by the image as binary
                PGM (P5);
      response: ``SEGRESP <m>\\n`` then m blocks of ``SCORE <s>\\n``
                followed by a 0/255 P5 mask of the image's size.
    """

    def __init__(self, command):
        self.command = list(command) if not isinstance(command, str) else [command]
        self.capabilities = SegmenterCapabilities(
            max_candidates=3, supports_point_prompts=True, supports_proposals=False
        )

    def segment_at(self, image, prompt, n_candidates: int = 3):
        from .pgm import parse_pgm_bytes

        img = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
        h, w = img.shape
        x, y = float(prompt[0]), float(prompt[1])
        if not (0 <= round(y) < h and 0 <= round(x) < w):
            raise ValueError(f"prompt ({x}, {y}) outside image {w}x{h}")
        payload = f"SEGREQ {x} {y} {n_candidates}\n".encode()
        payload += b"P5\n" + f"{w} {h}\n255\n".encode() + img.tobytes()
        proc = subprocess.run(
            self.command, input=payload, stdout=subprocess.PIPE, check=True
        )
        buf = proc.stdout
        nl = buf.index(b"\n")
        head = buf[:nl].decode().split()
        if head[0] != "SEGRESP":
            raise RuntimeError(f"external segmenter: bad response header {head!r}")
        count = int(head[1])
        pos = nl + 1
        out = []
        for _ in range(count):
            nl = buf.index(b"\n", pos)
            tok = buf[pos:nl].decode().split()
            if tok[0] != "SCORE":
                raise RuntimeError("external segmenter: expected SCORE line")
            score = float(tok[1])
            pos = nl + 1
            mask, pos = parse_pgm_bytes(buf, pos)
            if mask.shape != (h, w):
                raise RuntimeError("external segmenter: mask size mismatch")
            out.append((mask > 127, float(np.clip(score, 0.0, 1.0))))
        if not out:
            raise RuntimeError("external segmenter returned no masks")
        out.sort(key=lambda ms: -ms[1])
        return out


def dice(a, b) -> float:
    """Dice overlap 2|a∩b| / (|a|+|b|); 1.0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary_points(mask, max_points: int = 512) -> np.ndarray:
    """(x, y) coordinates of the filled mask's 8-connected boundary,
    uniformly subsampled to at most ``max_points``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() == 0:
        raise ValueError("empty mask has no boundary")
    filled = ndimage.binary_fill_holes(mask)
    bound = _boundary(filled)
    ys, xs = np.nonzero(bound)
    if len(xs) < 3:
        raise ValueError("mask boundary has fewer than 3 pixels")
    pts = np.column_stack([xs, ys]).astype(np.float64)
    if len(pts) > max_points:
        idx = np.linspace(0, len(pts) - 1, max_points).round().astype(int)
        pts = pts[idx]
    return pts


def circularity(mask, max_points: int = 512) -> float:
    """min/max ratio of per-boundary-point farthest distances.

    For every boundary point the distance to the farthest boundary point
    is collected; a perfect circle gives a constant set (the diameter) and
    ratio 1.
    """
    pts = boundary_points(mask, max_points)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    farthest = np.sqrt(d2.max(axis=1))
    return float(farthest.min() / farthest.max())


def largest_component(mask) -> np.ndarray:
    """Keep only the largest connected component (8-connected)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 1:
        return mask.copy()
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return labels == counts.argmax()


def mask_centroid(mask):
    ys, xs = np.nonzero(mask)
    return float(xs.mean()), float(ys.mean())


def _proposals(frame, segmenter, grid_stride=8):
    if segmenter.capabilities.supports_proposals:
        return segmenter.propose(frame)
    # Fallback for prompt-only backends: coarse prompt grid.
    h, w = np.asarray(frame).shape
    proposals, seen = [], set()
    for r in range(grid_stride // 2, h, grid_stride):
        for c in range(grid_stride // 2, w, grid_stride):
            for mask, score in segmenter.segment_at(frame, (c, r), 3):
                key = mask.tobytes()
                if key not in seen:
                    seen.add(key)
                    proposals.append((mask, score))
    return proposals


def detect_well(frame, segmenter, proposals=None) -> np.ndarray:
    """The well is the biggest proposal containing the frame's center."""
    frame = np.asarray(frame, dtype=np.float64)
    if proposals is None:
        proposals = _proposals(frame, segmenter)
    h, w = frame.shape
    cr, cc = h // 2, w // 2
    containing = [m for m, _ in proposals if m[cr, cc]]
    if not containing:
        raise WellNotFoundError("well not found: no proposal contains the center pixel")
    areas = [int(m.sum()) for m in containing]
    return containing[int(np.argmax(areas))].copy()


@dataclass
class CavityInfo:
    cavity_id: str
    mask: np.ndarray  # full-frame bool, holes filled
    bbox: tuple[int, int, int, int]  # (x0, y0, x1, y1) exclusive
    crop: tuple[int, int, int]  # (x0, y0, side)
    centroid: tuple[float, float]
    area: int
    circularity: float
    score: float


@dataclass
class CavitySet:
    well_mask: np.ndarray
    cavities: list[CavityInfo]
    crop_side: int
    rejected: dict = field(default_factory=dict)


def detect_cavities(frame, segmenter, config: SegmentConfig | None = None,
                    well_mask=None) -> CavitySet:
    """Detect cavities: proposals contained in the well, circular enough,
    and within the expected area band; overlapping survivors keep the
    higher score.  Raises with per-filter diagnostics when none survive."""
    config = config or SegmentConfig()
    frame = np.asarray(frame, dtype=np.float64)
    proposals = _proposals(frame, segmenter)
    if well_mask is None:
        well_mask = detect_well(frame, segmenter, proposals=proposals)
    nominal = config.nominal_area()
    lo, hi = config.area_band[0] * nominal, config.area_band[1] * nominal
    rejected = {"containment": 0, "circularity": 0, "area": 0, "overlap": 0}
    survivors = []
    for mask, score in proposals:
        area = int(mask.sum())
        if area == 0:
            continue
        outside = int((mask & ~well_mask).sum())
        if outside > 0.01 * area:
            rejected["containment"] += 1
            continue
        if not lo <= area <= hi:
            rejected["area"] += 1
            continue
        try:
            circ = circularity(mask)
        except ValueError:
            rejected["circularity"] += 1
            continue
        if circ < config.circularity_threshold:
            rejected["circularity"] += 1
            continue
        survivors.append((mask, score, circ))
    survivors.sort(key=lambda t: -t[1])
    accepted = []
    occupancy = np.zeros_like(well_mask, dtype=bool)
    for mask, score, circ in survivors:
        filled = ndimage.binary_fill_holes(mask)
        if (filled & occupancy).any():
            rejected["overlap"] += 1
            continue
        occupancy |= filled
        accepted.append((filled, score, circ))
    if not accepted:
        raise RuntimeError(
            "no cavities detected; rejected counts per criterion: "
            + json.dumps(rejected)
        )

    h, w = frame.shape
    infos = []
    for filled, score, circ in accepted:
        ys, xs = np.nonzero(filled)
        bbox = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        infos.append((filled, score, circ, bbox, mask_centroid(filled)))
    side = max(max(b[2] - b[0], b[3] - b[1]) for _, _, _, b, _ in infos)
    side += 2 * config.crop_pad
    side = min(side, h, w)
    cavities = []
    # Stable ordering: row-major by centroid.
    infos.sort(key=lambda t: (round(t[4][1]), round(t[4][0])))
    for j, (filled, score, circ, bbox, cent) in enumerate(infos):
        cx0 = int(round((bbox[0] + bbox[2]) / 2 - side / 2))
        cy0 = int(round((bbox[1] + bbox[3]) / 2 - side / 2))
        cx0 = int(np.clip(cx0, 0, w - side))
        cy0 = int(np.clip(cy0, 0, h - side))
        cavities.append(
            CavityInfo(
                cavity_id=f"cavity_{j:03d}",
                mask=filled,
                bbox=bbox,
                crop=(cx0, cy0, side),
                centroid=cent,
                area=int(filled.sum()),
                circularity=float(circ),
                score=float(score),
            )
        )
    return CavitySet(well_mask=well_mask, cavities=cavities, crop_side=side,
                     rejected=rejected)


def crop_timelapse(frames, crop) -> np.ndarray:
    """Extract a cavity's (f, side, side) crop stack from full frames."""
    x0, y0, side = crop
    frames = np.asarray(frames)
    return frames[:, y0 : y0 + side, x0 : x0 + side]


def exp_weighted_average(points, window: int = 10, decay: float = 0.7):
    """Exponentially weighted average of up to ``window`` points, most
    recent first: weights decay^0, decay^1, ... normalized to sum 1."""
    if len(points) == 0:
        raise ValueError("no points to average")
    if not 0.0 < decay < 1.0:
        raise ValueError("decay must be in (0, 1)")
    pts = np.asarray(points, dtype=np.float64)[: max(window, 1)]
    weights = decay ** np.arange(len(pts))
    weights /= weights.sum()
    return tuple(weights @ pts)


def initial_prompt(cavity_timelapse, config: SegmentConfig | None = None):
    """Seed prompt for the last frame from motion evidence.

    The time-mean frame is subtracted from the last frame; Canny contours
    of the difference are consolidated morphologically and the centroid of
    the largest surviving component becomes the prompt.  With no motion
    evidence the crop center is returned, flagged.
    """
    config = config or SegmentConfig()
    tl = np.asarray(cavity_timelapse, dtype=np.float64)
    if tl.shape[0] < 2:
        raise ValueError("initial prompt needs at least 2 frames")
    diff = tl[-1] - tl.mean(axis=0)
    edges = canny(
        diff,
        sigma=config.canny_sigma,
        low_threshold=config.canny_low,
        high_threshold=config.canny_high,
    )
    h, w = diff.shape
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    if not edges.any():
        return center, True
    closed = ndimage.binary_closing(edges, structure=np.ones((3, 3), bool))
    # Fill enclosed contours before opening: Canny rings are one pixel wide
    # and would not survive an erosion on their own.
    filled = ndimage.binary_fill_holes(closed)
    opened = ndimage.binary_opening(filled, structure=np.ones((3, 3), bool))
    labels, n = ndimage.label(opened, structure=np.ones((3, 3), bool))
    if n == 0:
        return center, True
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    if counts.max() < config.min_component_area:
        return center, True
    comp = ndimage.binary_fill_holes(labels == counts.argmax())
    return mask_centroid(comp), False


@dataclass
class OrganoidTrack:
    """Backward-propagated per-frame organoid masks for one cavity."""

    masks: np.ndarray  # (f, side, side) bool
    prompts: np.ndarray  # (f, 2) prompts used, (x, y)
    chosen_candidate: np.ndarray  # (f,) candidate index, -1 on failure
    dice_to_prev: np.ndarray  # (f,) Dice vs frame t+1; NaN for the last frame
    flagged_frames: list[int]
    valid: bool
    initial_fallback: bool


def _select_candidate(candidates, reference):
    """Pick argmax Dice vs the reference mask; ties break to higher score,
    then to smaller area."""
    ranked = []
    for idx, (mask, score) in enumerate(candidates):
        ranked.append((-dice(mask, reference), -score, int(mask.sum()), idx))
    ranked.sort()
    idx = ranked[0][3]
    return idx, candidates[idx][0]


def propagate_track(cavity_timelapse, segmenter, config: SegmentConfig | None = None) -> OrganoidTrack:
    """Track the organoid backward from the last frame (see module docs)."""
    config = config or SegmentConfig()
    tl = np.asarray(cavity_timelapse, dtype=np.float64)
    f, h, w = tl.shape
    masks = np.zeros((f, h, w), dtype=bool)
    prompts = np.zeros((f, 2))
    chosen = np.full(f, -1, dtype=int)
    dice_prev = np.full(f, np.nan)
    flagged: list[int] = []
    sources: dict[int, tuple[float, float]] = {}

    def clamp(p):
        return (float(np.clip(p[0], 0, w - 1)), float(np.clip(p[1], 0, h - 1)))

    prompt_last, fallback = initial_prompt(tl, config)
    prompt_last = clamp(prompt_last)
    prompts[f - 1] = prompt_last
    try:
        cands = segmenter.segment_at(tl[-1], prompt_last, 3)
        # No previous mask yet: order by segmenter score, then smaller area.
        order = sorted(
            range(len(cands)), key=lambda i: (-cands[i][1], int(cands[i][0].sum()))
        )
        chosen[f - 1] = order[0]
        masks[f - 1] = largest_component(cands[order[0]][0])
    except Exception:
        flagged.append(f - 1)
    if config.prompt_source == "centroid" and masks[f - 1].any():
        sources[f - 1] = mask_centroid(masks[f - 1])
    else:
        sources[f - 1] = prompt_last

    for t in range(f - 2, -1, -1):
        recent = [sources[u] for u in range(t + 1, min(t + config.ewa_window, f - 1) + 1)]
        prompt = clamp(exp_weighted_average(recent, config.ewa_window, config.ewa_decay))
        prompts[t] = prompt
        try:
            cands = segmenter.segment_at(tl[t], prompt, 3)
            idx, mask = _select_candidate(cands, masks[t + 1])
            chosen[t] = idx
            masks[t] = largest_component(mask)
        except Exception:
            flagged.append(t)
        dice_prev[t] = dice(masks[t], masks[t + 1])
        if config.prompt_source == "centroid" and masks[t].any():
            sources[t] = mask_centroid(masks[t])
        else:
            sources[t] = prompt

    valid = len(flagged) <= config.max_flagged_fraction * f
    return OrganoidTrack(
        masks=masks,
        prompts=prompts,
        chosen_candidate=chosen,
        dice_to_prev=dice_prev,
        flagged_frames=sorted(flagged),
        valid=valid,
        initial_fallback=fallback,
    )


def segment_well(frames, segmenter, config: SegmentConfig | None = None):
    """Detect cavities on the detection frame and track every organoid."""
    config = config or SegmentConfig()
    frames = np.asarray(frames, dtype=np.float64)
    cavset = detect_cavities(frames[config.detection_frame], segmenter, config)
    tracks = []
    for cav in cavset.cavities:
        tl = crop_timelapse(frames, cav.crop)
        tracks.append(propagate_track(tl, segmenter, config))
    return cavset, tracks


def save_segmentation(root, well_id: str, cavset: CavitySet, tracks) -> Path:
    """Write per-cavity mask stacks, track metadata, and cavity geometry."""
    out = layout.segmentation_dir(root, well_id)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"crop_side": cavset.crop_side, "rejected": cavset.rejected, "cavities": []}
    for cav, track in zip(cavset.cavities, tracks):
        cdir = out / cav.cavity_id
        cdir.mkdir(exist_ok=True)
        for t in range(track.masks.shape[0]):
            write_pgm(cdir / f"frame_{t:03d}.pgm", track.masks[t])
        (cdir / "track.json").write_text(
            json.dumps(
                {
                    "prompts": track.prompts.tolist(),
                    "chosen_candidate": track.chosen_candidate.tolist(),
                    "dice_to_prev": [
                        None if np.isnan(d) else d for d in track.dice_to_prev
                    ],
                    "flagged_frames": track.flagged_frames,
                    "valid": track.valid,
                    "initial_fallback": track.initial_fallback,
                }
            )
        )
        doc["cavities"].append(
            {
                "cavity_id": cav.cavity_id,
                "bbox": list(cav.bbox),
                "crop": list(cav.crop),
                "centroid": list(cav.centroid),
                "area": cav.area,
                "circularity": cav.circularity,
                "score": cav.score,
            }
        )
    write_pgm(out / "well.pgm", cavset.well_mask)
    (out / "cavities.json").write_text(json.dumps(doc))
    return out


def load_segmentation(root, well_id: str, frames: int):
    """Load (CavitySet, tracks) written by :func:`save_segmentation`."""
    out = layout.segmentation_dir(root, well_id)
    doc = json.loads((out / "cavities.json").read_text())
    well_mask = read_mask(out / "well.pgm")
    cavities, tracks = [], []
    for c in doc["cavities"]:
        cdir = out / c["cavity_id"]
        track_doc = json.loads((cdir / "track.json").read_text())
        masks = np.stack(
            [read_mask(cdir / f"frame_{t:03d}.pgm") for t in range(frames)]
        )
        cavities.append(
            CavityInfo(
                cavity_id=c["cavity_id"],
                mask=np.zeros_like(well_mask),  # full mask not persisted
                bbox=tuple(c["bbox"]),
                crop=tuple(c["crop"]),
                centroid=tuple(c["centroid"]),
                area=c["area"],
                circularity=c["circularity"],
                score=c["score"],
            )
        )
        tracks.append(
            OrganoidTrack(
                masks=masks,
                prompts=np.array(track_doc["prompts"]),
                chosen_candidate=np.array(track_doc["chosen_candidate"]),
                dice_to_prev=np.array(
                    [np.nan if d is None else d for d in track_doc["dice_to_prev"]]
                ),
                flagged_frames=track_doc["flagged_frames"],
                valid=track_doc["valid"],
                initial_fallback=track_doc["initial_fallback"],
            )
        )
    cavset = CavitySet(
        well_mask=well_mask,
        cavities=cavities,
        crop_side=doc["crop_side"],
        rejected=doc["rejected"],
    )
    return cavset, tracks
