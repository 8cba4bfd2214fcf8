"""Synthetic multi-cavity well timelapses with exact ground truth.

Each generated well is a circular region containing a grid of micro-cavities;
every cavity hosts one elliptical organoid whose area follows a per-cavity
trajectory (constant, then growing, or constant, then shrinking for
drug-responding cavities).  The well-level label is affine in the total
final organoid area, perturbed multiplicatively, so a least-squares fit on
the emitted ground truth is a valid oracle for the learned pipeline.

Raw acquisition is mimicked by emitting 4 overlapping quadrants at
``z_levels`` focal planes per frame: structures are blurred according to
their distance from each plane (organoids sit at per-cavity z), a global
per-frame drift translation is applied, and per-quadrant Gaussian noise is
added.  Frame 0 carries zero drift and is the registration reference.

Intensity model (gray levels): exterior 0, well interior 150, cavity wall
75, organoid 230.  Rasterized organoid areas track the analytic trajectory
to within a few px² (per-frame orientation jitter); the analytic trajectory
itself is exactly monotone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import __version__
from .manifest import Manifest, WellRecord, config_hash, layout, save_manifest
from .pgm import read_mask, write_pgm

INTENSITY_EXTERIOR = 0.0
INTENSITY_INTERIOR = 150.0
INTENSITY_WALL = 75.0
INTENSITY_ORGANOID = 230.0

WALL_WIDTH = 2.5
ORGANOID_MIN_AREA = 9.0


@dataclass
class SynthConfig:
    """Knobs for the synthetic benchmark generator.

    ``cavities_per_well`` is a closed [min, max] range; the default desk
    preset pins it to a constant so the additive label stays recoverable
    under mean pooling.  ``atp_slope``/``atp_intercept`` define the label
    law y = slope * total_final_area + intercept, and ``atp_noise`` the
    relative multiplicative noise on it.
    """

    wells: int = 40
    cavities_per_well: tuple[int, int] = (12, 12)
    frames: int = 50
    frame_size: tuple[int, int] = (192, 192)  # (width, height)
    cavity_diameter: float = 26.0
    growth_rate_range: tuple[float, float] = (0.4, 1.6)  # px²/frame
    intensity_noise: float = 4.0  # σ_img, gray levels
    atp_slope: float = 0.1
    atp_intercept: float = 10.0
    atp_noise: float = 0.05  # σ_atp, relative
    z_levels: int = 3
    quadrant_overlap: int = 16
    seed: int = 0
    # Trajectory / nuisance model.
    initial_area_range: tuple[float, float] = (25.0, 40.0)
    responder_fraction_range: tuple[float, float] = (0.0, 0.6)
    response_onset_range: tuple[float, float] = (0.35, 0.65)  # fraction of f
    growth_multiplier_range: tuple[float, float] = (0.7, 1.3)
    drift_max: float = 4.0
    contrast_drift: float = 0.08
    defocus_sigma: float = 1.8

    def validate(self) -> None:
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.wells < 1:
            raise ValueError("wells must be >= 1")
        if self.cavities_per_well[0] < 1 or self.cavities_per_well[1] < self.cavities_per_well[0]:
            raise ValueError("cavities_per_well must be a range with min >= 1")
        if self.z_levels < 1:
            raise ValueError("z_levels must be >= 1")
        if self.intensity_noise < 0:
            raise ValueError("intensity_noise must be >= 0")
        if self.atp_noise < 0:
            raise ValueError("atp_noise must be >= 0")
        if min(self.growth_rate_range) < 0:
            raise ValueError("growth_rate_range must be nonnegative")
        if min(self.initial_area_range) < 0:
            raise ValueError("initial_area_range must be nonnegative")
        if self.quadrant_overlap < 0:
            raise ValueError("quadrant_overlap must be >= 0")
        w, h = self.frame_size
        if (w + self.quadrant_overlap) % 2 or (h + self.quadrant_overlap) % 2:
            raise ValueError("frame_size + quadrant_overlap must be even in each axis")
        if w < 4 * self.cavity_diameter or h < 4 * self.cavity_diameter:
            raise ValueError("frame_size too small for cavity_diameter")

    def to_dict(self) -> dict:
        return asdict(self)


def desk_config(**overrides) -> SynthConfig:
    """Default small-scale preset: 40 wells, 50 frames, ~min to generate."""
    return SynthConfig(**overrides)


def paper_scale_config(**overrides) -> SynthConfig:
    """Preset matching the production acquisition counts (116 wells, 200
    frames, ~71 cavities per well)."""
    base = dict(
        wells=116,
        frames=200,
        cavities_per_well=(64, 78),
        frame_size=(416, 416),
    )
    base.update(overrides)
    return SynthConfig(**base)


@dataclass
class CavityTruth:
    """Ground truth for one cavity: geometry, trajectory, and masks.

    Masks are stored as fixed square crops with origin ``crop_origin``
    (x0, y0) in full-frame, drift-free coordinates (the frame-0 reference
    frame used after registration).
    """

    center: tuple[float, float]  # (x, y)
    radius_inner: float
    radius_outer: float
    organoid_z: int
    responder: bool
    onset_frame: int
    target_areas: np.ndarray  # (f,) analytic trajectory, exactly monotone
    areas: np.ndarray  # (f,) rasterized mask areas
    centroids: np.ndarray  # (f, 2) organoid centroid (x, y); NaN when empty
    crop_origin: tuple[int, int]
    organoid_masks: np.ndarray  # (f, s, s) bool
    cavity_mask: np.ndarray  # (s, s) bool


@dataclass
class GroundTruth:
    """Per-well ground truth, the oracle for segmentation and the label."""

    well_mask: np.ndarray  # (H, W) bool, drift-free coordinates
    cavities: list[CavityTruth]
    atp: float
    atp_noiseless: float
    drift: np.ndarray  # (f, 2) applied (dx, dy) per frame

    def total_final_area(self) -> float:
        return float(sum(c.areas[-1] for c in self.cavities))


def atp_label(final_areas, slope: float, intercept: float) -> float:
    """The generator's label law before noise."""
    return slope * float(np.sum(final_areas)) + intercept


def _disk_coverage(shape_yx, center_xy, radius) -> np.ndarray:
    h, w = shape_yx
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.hypot(xx - center_xy[0], yy - center_xy[1])
    return np.clip(radius - dist + 0.5, 0.0, 1.0)


def _annulus_coverage(shape_yx, center_xy, r_in, r_out) -> np.ndarray:
    return np.clip(
        _disk_coverage(shape_yx, center_xy, r_out)
        - _disk_coverage(shape_yx, center_xy, r_in),
        0.0,
        1.0,
    )


def _ellipse_field(shape_yx, center_xy, a, b, theta):
    """Implicit ellipse value q (q<=1 inside) over a local window; returns
    (q, window slices)."""
    h, w = shape_yx
    cx, cy = center_xy
    half = int(np.ceil(max(a, b))) + 3
    x0, x1 = max(0, int(cx) - half), min(w, int(cx) + half + 1)
    y0, y1 = max(0, int(cy) - half), min(h, int(cy) + half + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx, dy = xx - cx, yy - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = (dx * ct + dy * st) / max(a, 1e-9)
    v = (-dx * st + dy * ct) / max(b, 1e-9)
    q = u * u + v * v
    return q, (slice(y0, y1), slice(x0, x1))


def _rasterize_ellipse(shape_yx, center_xy, area, aspect, theta):
    """Binary ellipse mask of the requested analytic area.

    Returns (mask, soft coverage) as full-frame arrays; both empty when
    area < 1 px².
    """
    mask = np.zeros(shape_yx, dtype=bool)
    cov = np.zeros(shape_yx, dtype=np.float32)
    if area < 1.0:
        return mask, cov
    b = np.sqrt(area / (np.pi * aspect))
    a = aspect * b
    q, win = _ellipse_field(shape_yx, center_xy, a, b, theta)
    mask[win] = q <= 1.0
    # ~1 px soft edge for rendering.
    cov[win] = np.clip(0.5 + (1.0 - np.sqrt(q)) * min(a, b), 0.0, 1.0)
    return mask, cov


def _cavity_grid(config: SynthConfig, n: int):
    """Deterministic cavity slots: grid positions inside the well circle,
    nearest-to-center first."""
    w, h = config.frame_size
    cx, cy = w / 2.0, h / 2.0
    well_r = 0.46 * min(w, h)
    r_out = config.cavity_diameter / 2.0
    pitch = config.cavity_diameter + 7.0
    usable = well_r - r_out - 3.0
    span = int(np.floor(usable / pitch))
    slots = []
    for gy in range(-span, span + 1):
        for gx in range(-span, span + 1):
            px, py = cx + gx * pitch, cy + gy * pitch
            d = np.hypot(px - cx, py - cy)
            if d <= usable:
                slots.append((d, np.arctan2(py - cy, px - cx), px, py))
    slots.sort()
    if n > len(slots):
        raise ValueError(
            f"cavities_per_well: {n} requested but only {len(slots)} grid "
            f"slots fit in a {w}x{h} frame"
        )
    return [(px, py) for _, _, px, py in slots[:n]], (cx, cy), well_r


def _area_trajectory(config: SynthConfig, rng, f: int):
    """Per-cavity analytic area trajectory: flat until onset, then monotone."""
    a0 = rng.uniform(*config.initial_area_range)
    onset = int(round(rng.uniform(*config.response_onset_range) * f))
    onset = min(max(onset, 1), f - 1)
    rate = rng.uniform(*config.growth_rate_range)
    t = np.arange(f, dtype=np.float64)
    ramp = np.maximum(0.0, t - onset)
    return a0, onset, rate, ramp


def generate_well(config: SynthConfig, well_index: int):
    """Generate one well: raw quadrant z-stacks, ground truth, record.

    Returns ``(frames_raw, truth, record)`` where ``frames_raw[t][q][z]``
    is a uint8 quadrant image (q in row-major TL,TR,BL,BR order).
    Deterministic in (config, well_index).
    """
    config.validate()
    if not 0 <= well_index < config.wells:
        raise ValueError(f"well_index {well_index} out of range [0, {config.wells})")
    rng = np.random.default_rng([config.seed, well_index])
    w, h = config.frame_size
    f = config.frames
    n_cav = int(rng.integers(config.cavities_per_well[0], config.cavities_per_well[1] + 1))
    centers, (cx, cy), well_r = _cavity_grid(config, n_cav)

    # Well-level regime: how aggressively organoids grow, and how many respond.
    growth_mult = rng.uniform(*config.growth_multiplier_range)
    resp_frac = rng.uniform(*config.responder_fraction_range)
    n_resp = int(round(resp_frac * n_cav))
    responder = np.zeros(n_cav, dtype=bool)
    responder[rng.permutation(n_cav)[:n_resp]] = True

    r_out = config.cavity_diameter / 2.0
    r_in = r_out - WALL_WIDTH

    cavities_params = []
    for j in range(n_cav):
        a0, onset, rate, ramp = _area_trajectory(config, rng, f)
        rate *= growth_mult
        if responder[j]:
            target = np.maximum(ORGANOID_MIN_AREA if a0 > 0 else 0.0, a0 - rate * ramp)
        else:
            target = a0 + rate * ramp
        jitter = rng.uniform(-1.5, 1.5, size=2)
        aspect = rng.uniform(1.05, 1.6)
        theta0 = rng.uniform(0, np.pi)
        omega = rng.uniform(-0.01, 0.01)
        # Cap so the ellipse plus per-frame wobble stays inside the cavity.
        a_cap = np.pi * (r_in - np.hypot(*jitter) - 1.2) ** 2 / aspect
        target = np.minimum(target, a_cap)
        oz = int(rng.integers(0, config.z_levels))
        cavities_params.append(
            dict(
                center=(centers[j][0] + jitter[0], centers[j][1] + jitter[1]),
                slot=centers[j],
                aspect=aspect,
                theta0=theta0,
                omega=omega,
                organoid_z=oz,
                onset=onset,
                target=target,
            )
        )

    drift = np.zeros((f, 2))
    drift[1:] = rng.uniform(-config.drift_max, config.drift_max, size=(f - 1, 2))

    # Static structure layer (well + cavity walls), drift-free coordinates.
    struct = np.full((h, w), INTENSITY_EXTERIOR, dtype=np.float32)
    well_cov = _disk_coverage((h, w), (cx, cy), well_r)
    struct += (INTENSITY_INTERIOR - INTENSITY_EXTERIOR) * well_cov
    for p in cavities_params:
        ring = _annulus_coverage((h, w), p["slot"], r_in, r_out)
        struct += (INTENSITY_WALL - INTENSITY_INTERIOR) * ring
    z_mid = (config.z_levels - 1) / 2.0
    struct_by_z = [
        ndimage.gaussian_filter(struct, config.defocus_sigma * abs(z - z_mid))
        for z in range(config.z_levels)
    ]

    well_mask = well_cov >= 0.5
    crop_half = int(np.ceil(r_out)) + 3
    crop_side = 2 * crop_half

    # Per-frame organoid rasterization with monotonicity on target areas.
    org_masks = np.zeros((n_cav, f, crop_side, crop_side), dtype=bool)
    centroids = np.full((n_cav, f, 2), np.nan)
    areas = np.zeros((n_cav, f))
    crop_origins = []
    cavity_masks = np.zeros((n_cav, crop_side, crop_side), dtype=bool)
    for j, p in enumerate(cavities_params):
        x0 = int(round(p["slot"][0])) - crop_half
        y0 = int(round(p["slot"][1])) - crop_half
        crop_origins.append((x0, y0))
        cav_cov = _disk_coverage((h, w), p["slot"], r_in)
        cavity_masks[j] = (cav_cov >= 0.5)[y0 : y0 + crop_side, x0 : x0 + crop_side]

    frames_raw = []
    hq = (h + config.quadrant_overlap) // 2
    wq = (w + config.quadrant_overlap) // 2
    frame_cov = np.zeros((config.z_levels, h, w), dtype=np.float32)

    for t in range(f):
        frame_cov[:] = 0.0
        for j, p in enumerate(cavities_params):
            wobble = rng.uniform(-0.4, 0.4, size=2)
            center_t = (p["center"][0] + wobble[0], p["center"][1] + wobble[1])
            theta_t = p["theta0"] + p["omega"] * t
            mask, cov = _rasterize_ellipse(
                (h, w), center_t, p["target"][t], p["aspect"], theta_t
            )
            x0, y0 = crop_origins[j]
            org_masks[j, t] = mask[y0 : y0 + crop_side, x0 : x0 + crop_side]
            areas[j, t] = mask.sum()
            if areas[j, t] > 0:
                ys, xs = np.nonzero(mask)
                centroids[j, t] = (xs.mean(), ys.mean())
            frame_cov[p["organoid_z"]] = np.maximum(frame_cov[p["organoid_z"]], cov)

        # Composite each focal plane: structures + organoids, both defocused
        # by their distance to the plane.
        slices = []
        gain = 1.0 + config.contrast_drift * (2.0 * t / max(f - 1, 1) - 1.0)
        offset = 12.0 * config.contrast_drift * (2.0 * t / max(f - 1, 1) - 1.0)
        for z in range(config.z_levels):
            img = struct_by_z[z].copy()
            for zg in range(config.z_levels):
                if not frame_cov[zg].any():
                    continue
                cov_b = ndimage.gaussian_filter(
                    frame_cov[zg], config.defocus_sigma * abs(z - zg)
                )
                img = img * (1.0 - cov_b) + INTENSITY_ORGANOID * cov_b
            img = img * gain + offset
            if t > 0:
                img = ndimage.shift(
                    img, (drift[t, 1], drift[t, 0]), order=1, mode="nearest"
                )
            slices.append(img)

        quads = []
        for q, (ys, xs) in enumerate(
            [
                (slice(0, hq), slice(0, wq)),
                (slice(0, hq), slice(w - wq, w)),
                (slice(h - hq, h), slice(0, wq)),
                (slice(h - hq, h), slice(w - wq, w)),
            ]
        ):
            stack = []
            for z in range(config.z_levels):
                img = slices[z][ys, xs]
                if config.intensity_noise > 0:
                    img = img + config.intensity_noise * rng.standard_normal(
                        img.shape, dtype=np.float32
                    )
                stack.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
            quads.append(stack)
        frames_raw.append(quads)

    total_final = float(areas[:, -1].sum())
    y_clean = atp_label(areas[:, -1], config.atp_slope, config.atp_intercept)
    y = y_clean * (1.0 + config.atp_noise * rng.standard_normal()) if config.atp_noise > 0 else y_clean

    cavities = [
        CavityTruth(
            center=tuple(map(float, p["center"])),
            radius_inner=r_in,
            radius_outer=r_out,
            organoid_z=p["organoid_z"],
            responder=bool(responder[j]),
            onset_frame=p["onset"],
            target_areas=p["target"],
            areas=areas[j],
            centroids=centroids[j],
            crop_origin=crop_origins[j],
            organoid_masks=org_masks[j],
            cavity_mask=cavity_masks[j],
        )
        for j, p in enumerate(cavities_params)
    ]
    truth = GroundTruth(
        well_mask=well_mask,
        cavities=cavities,
        atp=float(y),
        atp_noiseless=float(y_clean),
        drift=drift,
    )
    well_id = f"well_{well_index:03d}"
    record = WellRecord(
        well_id=well_id,
        atp=float(y),
        fold=-1,
        paths={"raw": well_id, "gt": f"{well_id}/gt"},
    )
    del total_final
    return frames_raw, truth, record


def _save_ground_truth(root, well_id: str, truth: GroundTruth) -> None:
    gt_dir = layout.gt_dir(root, well_id)
    gt_dir.mkdir(parents=True, exist_ok=True)
    write_pgm(gt_dir / "well.pgm", truth.well_mask)
    doc = {
        "atp": truth.atp,
        "atp_noiseless": truth.atp_noiseless,
        "drift": truth.drift.tolist(),
        "cavities": [],
    }
    for j, c in enumerate(truth.cavities):
        cdir = gt_dir / f"cavity_{j:03d}"
        cdir.mkdir(exist_ok=True)
        write_pgm(cdir / "cavity.pgm", c.cavity_mask)
        for t in range(c.organoid_masks.shape[0]):
            write_pgm(cdir / f"frame_{t:03d}.pgm", c.organoid_masks[t])
        doc["cavities"].append(
            {
                "center": list(c.center),
                "radius_inner": c.radius_inner,
                "radius_outer": c.radius_outer,
                "organoid_z": c.organoid_z,
                "responder": c.responder,
                "onset_frame": c.onset_frame,
                "target_areas": c.target_areas.tolist(),
                "areas": c.areas.tolist(),
                "centroids": np.where(np.isnan(c.centroids), None, c.centroids).tolist(),
                "crop_origin": list(c.crop_origin),
            }
        )
    (gt_dir / "truth.json").write_text(json.dumps(doc))


def load_ground_truth(root, well_id: str) -> GroundTruth:
    """Load a well's ground truth back from the on-disk tree."""
    gt_dir = layout.gt_dir(root, well_id)
    doc = json.loads((gt_dir / "truth.json").read_text())
    cavities = []
    for j, c in enumerate(doc["cavities"]):
        cdir = gt_dir / f"cavity_{j:03d}"
        cavity_mask = read_mask(cdir / "cavity.pgm")
        f = len(c["areas"])
        org = np.stack([read_mask(cdir / f"frame_{t:03d}.pgm") for t in range(f)])
        cent = np.array(
            [[np.nan if v is None else v for v in pair] for pair in c["centroids"]]
        )
        cavities.append(
            CavityTruth(
                center=tuple(c["center"]),
                radius_inner=c["radius_inner"],
                radius_outer=c["radius_outer"],
                organoid_z=c["organoid_z"],
                responder=c["responder"],
                onset_frame=c["onset_frame"],
                target_areas=np.array(c["target_areas"]),
                areas=np.array(c["areas"]),
                centroids=cent,
                crop_origin=tuple(c["crop_origin"]),
                organoid_masks=org,
                cavity_mask=cavity_mask,
            )
        )
    return GroundTruth(
        well_mask=read_mask(gt_dir / "well.pgm"),
        cavities=cavities,
        atp=doc["atp"],
        atp_noiseless=doc["atp_noiseless"],
        drift=np.array(doc["drift"]),
    )


def generate_dataset(config: SynthConfig, root, workers: int = 1) -> Manifest:
    """Generate the full dataset tree and manifest under ``root``.

    Pure function of (config, seed): identical inputs produce a
    byte-identical tree.  Per-well generation is independent; the manifest
    write is the only serialized step.
    """
    from .evaluate import kfold_split  # local import: evaluate sits above us

    config.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    chash = config_hash(config.to_dict())

    records = []

    def build(i):
        frames_raw, truth, record = generate_well(config, i)
        for t, quads in enumerate(frames_raw):
            for q, stack in enumerate(quads):
                for z, img in enumerate(stack):
                    path = layout.raw_quadrant(root, record.well_id, t, q, z)
                    write_pgm(path, img, comment=f"otap {__version__} {chash}")
        _save_ground_truth(root, record.well_id, truth)
        return record

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_generate_one, [(config, i, str(root)) for i in range(config.wells)]))
    else:
        records = [build(i) for i in range(config.wells)]

    folds = kfold_split([r.well_id for r in records], k=min(4, config.wells), seed=config.seed)
    for r in records:
        r.fold = folds.fold_of[r.well_id]

    manifest = Manifest(
        wells=records,
        frames=config.frames,
        z_levels=config.z_levels,
        quadrant_overlap=config.quadrant_overlap,
        config_hash=chash,
        extra={"synth_config": config.to_dict()},
    )
    save_manifest(root, manifest)
    return manifest


def _generate_one(args):
    """Process-pool helper: generate and write a single well."""
    config, i, root = args
    frames_raw, truth, record = generate_well(config, i)
    chash = config_hash(config.to_dict())
    for t, quads in enumerate(frames_raw):
        for q, stack in enumerate(quads):
            for z, img in enumerate(stack):
                write_pgm(
                    layout.raw_quadrant(root, record.well_id, t, q, z),
                    img,
                    comment=f"otap {__version__} {chash}",
                )
    _save_ground_truth(root, record.well_id, truth)
    return record
