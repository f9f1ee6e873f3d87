"""Synthetic multi-camera detection streams with hidden identity labels.

A world holds a pool of identities (unit appearance vectors) and a set of
cameras (linear observation models).  Walkers enter a camera, dwell for a few
frames, and emit one observation per frame:

    obs = camera.transform @ (appearance + pose) + camera.bias + noise

where pose is a per-walker state that performs a slow random walk inside a
fixed low-rank latent subspace shared by the whole world.  Consecutive
frames of one walker differ only slightly, but over a full pass the pose
wanders across its stationary spread, the analog of articulation and
viewpoint change, while identity information lives mostly in the orthogonal
complement.

Each detection also carries a photometric flicker: a random shift along the
uniform brightness direction, fresh per frame, modeling exposure variation
between crops.  Tracking-style noise enters three more ways.  Per-frame
dropout deletes detections.  Crossing events (off by default) swap the
observation-generating identity between two concurrent walkers for a single
frame.  Ghost events emit a short-lived extra detection whose appearance
blends two concurrent walkers, the analog of a spurious box covering two
people; each ghost is labeled with whichever walker dominates the blend,
so a ghost chain usually mixes ground-truth labels.  Ground truth and the
ghost flag are evaluation-only channels, stripped before anything downstream
of the simulator and the evaluator sees them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .errors import DegenerateInputError, InvalidInputError

log = logging.getLogger(__name__)

GT_HIDDEN = -1

# Salts for deriving independent per-purpose RNG streams from the world seed.
_SALT_IDENTITIES = 101
_SALT_CAMERAS = 202
_SALT_STREAM = 303
_SALT_SPLIT = 404
_SALT_POSE = 505

# Identity appearances are sampled with a minimum angular separation so that
# no two people are near-duplicates; candidates too close to an accepted
# appearance are rejected and redrawn.
_APPEARANCE_MAX_COS = 0.45
_APPEARANCE_MAX_TRIES = 1000


@dataclass(frozen=True)
class StreamConfig:
    """Generation parameters for one synthetic benchmark stream."""

    fps: float = 2.0
    duration_frames: int = 2000
    entry_rate: float = 0.10
    dwell_mean: float = 15.0
    crossing_prob: float = 0.0
    ghost_rate: float = 0.08
    dropout_prob: float = 0.05
    d_latent: int = 32
    d_obs: int = 64
    pose_dim: int = 6
    pose_sigma: float = 1.1
    pose_persistence: float = 0.8
    flicker_sigma: float = 1.3
    noise_sigma: float = 0.06
    warp_scale: float = 0.05
    bias_scale: float = 0.6
    residual_bias_scale: float = 0.05

    def validate(self) -> None:
        if self.fps <= 0 or self.duration_frames < 1:
            raise InvalidInputError("fps must be positive and duration_frames >= 1")
        if self.entry_rate < 0 or self.dwell_mean < 1:
            raise InvalidInputError("entry_rate must be >= 0 and dwell_mean >= 1")
        for name in ("crossing_prob", "ghost_rate", "dropout_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1]")
        if self.d_latent < 1 or self.d_obs < self.d_latent:
            raise InvalidInputError("need d_obs >= d_latent >= 1")
        if not 1 <= self.pose_dim <= self.d_latent:
            raise InvalidInputError("pose_dim must lie in [1, d_latent]")
        if not 0.0 <= self.pose_persistence < 1.0:
            raise InvalidInputError("pose_persistence must lie in [0, 1)")
        scales = (
            self.pose_sigma,
            self.flicker_sigma,
            self.noise_sigma,
            self.warp_scale,
            self.bias_scale,
            self.residual_bias_scale,
        )
        if min(scales) < 0:
            raise InvalidInputError("noise and camera perturbation scales must be >= 0")


@dataclass(frozen=True)
class IdentityLatent:
    identity_id: int
    appearance: np.ndarray  # unit vector, d_latent


@dataclass(frozen=True)
class CameraModel:
    camera_id: int
    transform: np.ndarray  # d_obs x d_latent, full column rank
    bias: np.ndarray  # d_obs
    noise_sigma: float


@dataclass(frozen=True, eq=False)
class Detection:
    det_id: int
    frame: int
    camera_id: int
    observation: np.ndarray
    gt_id: int = GT_HIDDEN
    is_ghost: bool = False

    def strip_gt(self) -> "Detection":
        """Clear the evaluation-only channels (label and ghost flag)."""
        return replace(self, gt_id=GT_HIDDEN, is_ghost=False)


@dataclass(frozen=True)
class FrameBatch:
    camera_id: int
    frame: int
    detections: tuple[Detection, ...]


@dataclass(frozen=True)
class SyntheticWorld:
    config: StreamConfig
    identities: tuple[IdentityLatent, ...]
    cameras: tuple[CameraModel, ...]
    pose_basis: np.ndarray  # d_latent x pose_dim, orthonormal columns
    seed: int


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def generate_world(config: StreamConfig, n_identities: int, n_cameras: int, seed: int) -> SyntheticWorld:
    """Draw identity appearances and camera models for a fixed seed."""
    config.validate()
    if n_identities < 2:
        raise InvalidInputError("need at least 2 identities")
    if n_cameras < 1:
        raise InvalidInputError("need at least 1 camera")

    rng_id = _rng(seed, _SALT_IDENTITIES)
    apps = np.zeros((n_identities, config.d_latent))
    placed = 0
    tries = 0
    while placed < n_identities:
        cand = rng_id.standard_normal(config.d_latent)
        cand /= np.linalg.norm(cand)
        if placed and float(np.max(apps[:placed] @ cand)) > _APPEARANCE_MAX_COS:
            tries += 1
            if tries > _APPEARANCE_MAX_TRIES:
                raise DegenerateInputError(
                    "cannot place %d identities in %d latent dims with pairwise "
                    "cosine below %.2f" % (n_identities, config.d_latent, _APPEARANCE_MAX_COS)
                )
            continue
        apps[placed] = cand
        placed += 1
        tries = 0
    identities = tuple(
        IdentityLatent(identity_id=i, appearance=apps[i]) for i in range(n_identities)
    )

    rng_pose = _rng(seed, _SALT_POSE)
    pose_basis, _ = np.linalg.qr(rng_pose.standard_normal((config.d_latent, config.pose_dim)))

    # Shared lift embeds the latent space into observation space; each camera
    # adds a small warp plus a bias.  The bias is mostly a brightness offset
    # along the uniform direction (the photometric family the augmentations
    # also span) with a small dense residual that no augmentation mimics.
    lift = np.zeros((config.d_obs, config.d_latent))
    lift[: config.d_latent, : config.d_latent] = np.eye(config.d_latent)
    uniform_dir = np.ones(config.d_obs) / np.sqrt(config.d_obs)
    rng_cam = _rng(seed, _SALT_CAMERAS)
    cameras = []
    for c in range(n_cameras):
        warp = config.warp_scale * rng_cam.standard_normal((config.d_obs, config.d_latent))
        brightness = config.bias_scale * rng_cam.standard_normal()
        residual = config.residual_bias_scale * rng_cam.standard_normal(config.d_obs)
        cameras.append(
            CameraModel(
                camera_id=c,
                transform=lift + warp,
                bias=brightness * uniform_dir + residual,
                noise_sigma=config.noise_sigma,
            )
        )
    return SyntheticWorld(
        config=config,
        identities=identities,
        cameras=tuple(cameras),
        pose_basis=pose_basis,
        seed=seed,
    )


@dataclass(eq=False)
class _Walker:
    # eq=False: membership checks mean "this exact walker object", and the
    # same identity may walk through one camera twice at once.
    identity: int
    end_frame: int
    pose_state: np.ndarray  # pose_dim coefficients, stationary AR(1)


@dataclass
class _Ghost:
    a: _Walker
    b: _Walker
    weight: float  # share of walker a in the blend
    offset: np.ndarray  # event-specific latent shift away from both people
    frames_left: int


# Ghost blend weights start near an even split and drift a little each frame,
# so consecutive ghost detections look alike while the dominant contributor,
# and with it the ground-truth label, can flip mid-event.  The fixed offset
# models occluder and background content in the double box: it keeps the
# event's detections mutually similar yet unlike either real appearance.
_GHOST_W_LO, _GHOST_W_HI = 0.35, 0.65
_GHOST_W_CLIP_LO, _GHOST_W_CLIP_HI = 0.3, 0.7
_GHOST_W_DRIFT = 0.15
_GHOST_OFFSET_SCALE = 1.0
_GHOST_EXTRA_FRAMES = 1.5


def simulate_stream(world: SyntheticWorld) -> list[FrameBatch]:
    """Roll the world forward, one independent RNG stream per camera.

    Returns frame batches ordered by (camera_id, frame), with globally unique
    det_ids assigned in that order.  Dropout removes single detections;
    crossing events swap which identity generates the observation for one
    frame while gt labels stay with their walkers; ghost events add transient
    blended detections on top of the real ones.
    """
    cfg = world.config
    n_ids = len(world.identities)
    apps = np.stack([ident.appearance for ident in world.identities])
    pose_scale = cfg.pose_sigma / np.sqrt(cfg.pose_dim)
    rho = cfg.pose_persistence
    innov = np.sqrt(1.0 - rho * rho)
    bright_dir = np.ones(cfg.d_obs) / np.sqrt(cfg.d_obs)

    batches: list[FrameBatch] = []
    det_counter = 0
    for cam in world.cameras:
        rng = _rng(world.seed, _SALT_STREAM, cam.camera_id)
        walkers: list[_Walker] = []
        ghost: _Ghost | None = None
        for f in range(cfg.duration_frames):
            walkers = [w for w in walkers if w.end_frame > f]
            n_new = rng.poisson(cfg.entry_rate)
            for _ in range(n_new):
                ident = int(rng.integers(n_ids))
                dwell = 1 + int(rng.poisson(max(cfg.dwell_mean - 1.0, 0.0)))
                state = pose_scale * rng.standard_normal(cfg.pose_dim)
                walkers.append(_Walker(identity=ident, end_frame=f + dwell, pose_state=state))

            if ghost is not None and (
                ghost.frames_left <= 0 or ghost.a not in walkers or ghost.b not in walkers
            ):
                ghost = None
            if ghost is None and len(walkers) >= 2 and rng.random() < cfg.ghost_rate:
                i, j = rng.choice(len(walkers), size=2, replace=False)
                shift = rng.standard_normal(cfg.d_latent)
                shift *= _GHOST_OFFSET_SCALE / np.linalg.norm(shift)
                ghost = _Ghost(
                    a=walkers[int(i)],
                    b=walkers[int(j)],
                    weight=float(rng.uniform(_GHOST_W_LO, _GHOST_W_HI)),
                    offset=shift,
                    frames_left=1 + int(rng.poisson(_GHOST_EXTRA_FRAMES)),
                )

            # Observation source per walker; a crossing event swaps two.
            source = {id(w): w.identity for w in walkers}
            if len(walkers) >= 2 and rng.random() < cfg.crossing_prob:
                i, j = rng.choice(len(walkers), size=2, replace=False)
                wi, wj = walkers[int(i)], walkers[int(j)]
                source[id(wi)], source[id(wj)] = source[id(wj)], source[id(wi)]

            dets = []
            for w in walkers:
                # The pose walk advances every frame, observed or not.
                w.pose_state = rho * w.pose_state + innov * (
                    pose_scale * rng.standard_normal(cfg.pose_dim)
                )
                if rng.random() < cfg.dropout_prob:
                    continue
                pose = world.pose_basis @ w.pose_state
                flicker = cfg.flicker_sigma * rng.standard_normal()
                obs = (
                    cam.transform @ (apps[source[id(w)]] + pose)
                    + cam.bias
                    + flicker * bright_dir
                    + cam.noise_sigma * rng.standard_normal(cfg.d_obs)
                )
                dets.append((w.identity, obs, False))
            if ghost is not None:
                wgt = ghost.weight
                blend = (
                    wgt * apps[ghost.a.identity]
                    + (1.0 - wgt) * apps[ghost.b.identity]
                    + ghost.offset
                )
                pose_mix = world.pose_basis @ (
                    wgt * ghost.a.pose_state + (1.0 - wgt) * ghost.b.pose_state
                )
                flicker = cfg.flicker_sigma * rng.standard_normal()
                obs = (
                    cam.transform @ (blend + pose_mix)
                    + cam.bias
                    + flicker * bright_dir
                    + cam.noise_sigma * rng.standard_normal(cfg.d_obs)
                )
                label = ghost.a.identity if wgt >= 0.5 else ghost.b.identity
                dets.append((label, obs, True))
                ghost.weight = float(
                    np.clip(
                        wgt + _GHOST_W_DRIFT * rng.standard_normal(),
                        _GHOST_W_CLIP_LO,
                        _GHOST_W_CLIP_HI,
                    )
                )
                ghost.frames_left -= 1

            det_objs = []
            for gt, obs, ghostly in dets:
                det_objs.append(
                    Detection(
                        det_id=det_counter,
                        frame=f,
                        camera_id=cam.camera_id,
                        observation=obs,
                        gt_id=gt,
                        is_ghost=ghostly,
                    )
                )
                det_counter += 1
            batches.append(FrameBatch(camera_id=cam.camera_id, frame=f, detections=tuple(det_objs)))
    return batches


def augment_batch(x: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Stochastic observation-space augmentation, applied row-wise.

    Composes per-coordinate Gaussian jitter, a random brightness shift along
    the uniform direction, a random per-row gain, and random coordinate
    dropout.  Every component scales with ``strength`` and strength 0 is the
    identity.  The brightness and gain components span the photometric
    family along which cameras typically differ.
    """
    if strength < 0:
        raise InvalidInputError("augmentation strength must be >= 0")
    a = np.atleast_2d(np.asarray(x))
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("observations contain non-finite entries")
    if strength == 0.0:
        return a.copy()
    d = a.shape[1]
    jitter = 0.15 * strength * rng.standard_normal(a.shape)
    brightness = (
        1.5 * strength * rng.standard_normal((a.shape[0], 1)) * (1.0 / np.sqrt(d))
    ) * np.ones((1, d))
    gain = 1.0 + 0.5 * strength * rng.uniform(-1.0, 1.0, size=(a.shape[0], 1))
    keep = rng.random(a.shape) >= 0.25 * strength
    return (gain * (a + jitter + brightness) * keep).astype(a.dtype, copy=False)


def augment_observation(x: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Single-vector convenience wrapper around :func:`augment_batch`."""
    v = np.asarray(x)
    if v.ndim != 1:
        raise InvalidInputError("augment_observation expects a vector")
    return augment_batch(v[None, :], rng, strength)[0]


class DetectionTable:
    """Column-oriented view of a detection set for bulk numpy work."""

    def __init__(self, det_id, frame, camera_id, gt_id, observations, ghost=None):
        self.det_id = np.asarray(det_id, dtype=np.int64)
        self.frame = np.asarray(frame, dtype=np.int64)
        self.camera_id = np.asarray(camera_id, dtype=np.int64)
        self.gt_id = np.asarray(gt_id, dtype=np.int64)
        self.observations = np.asarray(observations)
        n = len(self.det_id)
        if ghost is None:
            self.ghost = np.zeros(n, dtype=np.int64)
        else:
            self.ghost = np.asarray(ghost, dtype=np.int64)
        if not (
            len(self.frame) == len(self.camera_id) == len(self.gt_id) == len(self.ghost) == n
        ):
            raise InvalidInputError("detection table columns disagree on length")
        if self.observations.ndim != 2 or self.observations.shape[0] != n:
            raise InvalidInputError("observation matrix does not match table length")

    def __len__(self) -> int:
        return len(self.det_id)

    @staticmethod
    def from_frames(frames: Iterable[FrameBatch]) -> "DetectionTable":
        dets = [d for fb in frames for d in fb.detections]
        return DetectionTable.from_detections(dets)

    @staticmethod
    def from_detections(dets: list[Detection]) -> "DetectionTable":
        if not dets:
            d = 0
            return DetectionTable(
                np.zeros(0, np.int64),
                np.zeros(0, np.int64),
                np.zeros(0, np.int64),
                np.zeros(0, np.int64),
                np.zeros((0, d)),
            )
        return DetectionTable(
            det_id=[d.det_id for d in dets],
            frame=[d.frame for d in dets],
            camera_id=[d.camera_id for d in dets],
            gt_id=[d.gt_id for d in dets],
            observations=np.stack([d.observation for d in dets]),
            ghost=[int(d.is_ghost) for d in dets],
        )

    def select(self, mask_or_idx) -> "DetectionTable":
        return DetectionTable(
            self.det_id[mask_or_idx],
            self.frame[mask_or_idx],
            self.camera_id[mask_or_idx],
            self.gt_id[mask_or_idx],
            self.observations[mask_or_idx],
            self.ghost[mask_or_idx],
        )

    def without_gt(self) -> "DetectionTable":
        """Copy with the evaluation-only channels (gt, ghost flag) cleared."""
        return DetectionTable(
            self.det_id,
            self.frame,
            self.camera_id,
            np.full(len(self), GT_HIDDEN, dtype=np.int64),
            self.observations,
        )

    def astype(self, dtype) -> "DetectionTable":
        return DetectionTable(
            self.det_id,
            self.frame,
            self.camera_id,
            self.gt_id,
            self.observations.astype(dtype, copy=False),
            self.ghost,
        )


def split_eval(
    world: SyntheticWorld,
    stream: list[FrameBatch],
    query_frac: float,
    eval_window_frac: float = 0.15,
) -> tuple[DetectionTable, DetectionTable]:
    """Carve a query/gallery evaluation split out of the stream tail.

    The final ``eval_window_frac`` of frames is reserved for evaluation;
    everything earlier is training data (see :func:`training_table`).  Within
    the window, identities seen by at least two cameras are query-eligible,
    and per (identity, camera) group roughly ``query_frac`` of detections
    move to the query set, always leaving at least one in the gallery so
    every query keeps a cross-camera match.
    """
    if not 0.0 < query_frac < 1.0:
        raise InvalidInputError("query_frac must lie strictly between 0 and 1")
    if not 0.0 < eval_window_frac < 1.0:
        raise InvalidInputError("eval_window_frac must lie strictly between 0 and 1")
    table = DetectionTable.from_frames(stream)
    if len(table) == 0:
        raise DegenerateInputError("stream holds no detections to split")
    start = eval_window_start(world.config, eval_window_frac)
    # Ghost detections stay in the training stream but are junk crops, so
    # they are excluded from the curated evaluation sets.
    pool = table.select((table.frame >= start) & (table.ghost == 0))
    if len(pool) == 0:
        raise DegenerateInputError("evaluation window holds no detections")

    cams_per_id: dict[int, set[int]] = {}
    for gt, cam in zip(pool.gt_id, pool.camera_id):
        cams_per_id.setdefault(int(gt), set()).add(int(cam))
    eligible = {gt for gt, cams in cams_per_id.items() if len(cams) >= 2}
    skipped = len(cams_per_id) - len(eligible)
    if skipped:
        log.warning(
            "split_eval: %d identities appear under a single camera and are gallery-only",
            skipped,
        )
    if not eligible:
        raise DegenerateInputError("no identity appears under two cameras in the window")

    rng = _rng(world.seed, _SALT_SPLIT)
    query_mask = np.zeros(len(pool), dtype=bool)
    order = np.lexsort((pool.det_id, pool.camera_id, pool.gt_id))
    groups: dict[tuple[int, int], list[int]] = {}
    for pos in order:
        gt = int(pool.gt_id[pos])
        if gt not in eligible:
            continue
        groups.setdefault((gt, int(pool.camera_id[pos])), []).append(int(pos))
    for key in sorted(groups):
        members = groups[key]
        n = len(members)
        take = min(max(int(round(query_frac * n)), 1), n - 1)
        if take <= 0:
            continue
        picked = rng.choice(n, size=take, replace=False)
        for p in picked:
            query_mask[members[int(p)]] = True

    query = pool.select(query_mask)
    gallery = pool.select(~query_mask)
    if len(query) == 0:
        raise DegenerateInputError("query split is empty; raise query_frac or traffic")
    return query, gallery


def eval_window_start(config: StreamConfig, eval_window_frac: float) -> int:
    """First frame index of the held-out evaluation window."""
    return config.duration_frames - max(int(round(eval_window_frac * config.duration_frames)), 1)


def training_table(
    world: SyntheticWorld, stream: list[FrameBatch], eval_window_frac: float = 0.15
) -> DetectionTable:
    """Detections before the evaluation window, with gt labels stripped."""
    table = DetectionTable.from_frames(stream)
    start = eval_window_start(world.config, eval_window_frac)
    return table.select(table.frame < start).without_gt()
