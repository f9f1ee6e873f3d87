"""End-to-end pipeline: simulate, train, mine, retrain, reduce, evaluate.

The in-memory functions here are the single source of truth; the stage_*
wrappers add persistence, digests, and skip-if-done semantics on top for the
command line.  Stage boundaries follow the data flow:

    simulate -> train-cid -> extract -> trackletize -> train-tsd -> fit-ccr -> evaluate

Ground-truth identity labels exist only in the simulator's output and the
evaluation split; every table handed to a training stage has them stripped.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ccr as ccr_mod
from . import contrastive as ctr
from . import encoder as enc
from . import evaluation as ev
from . import storage
from . import synth
from . import tracklet as trk
from .errors import InvalidInputError, ManifestError

log = logging.getLogger(__name__)

# Seed salts so each stage draws from an independent stream.
_SALT_CID_INIT = 21
_SALT_CID_RNG = 22
_SALT_TSD_RNG = 23
_SALT_RANDOM_INIT = 24
_SALT_CCR = 25

STEP_ARMS = ("cid", "tsd", "cid+tsd", "cid+tsd+ccr")
DATA_FRACTIONS = (0.01, 0.05, 0.1, 0.25, 0.5, 1.0)
MIN_LEN_VALUES = (1, 3, 5, 9)
MODEL_SIZES = ((64, 128, 64), (64, 256, 128), (64, 512, 256, 128))

SCHEMA_VERSION = 1


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class PipelineConfig:
    stream: synth.StreamConfig = field(default_factory=synth.StreamConfig)
    contrastive: ctr.ContrastiveConfig = field(default_factory=ctr.ContrastiveConfig)
    n_identities: int = 200
    n_cameras: int = 6
    encoder_dims: tuple[int, ...] = (64, 256, 128)
    min_len: int = 5
    min_affinity: float | None = 0.55
    ccr_k: int | None = None
    query_frac: float = 0.33
    eval_window_frac: float = 0.15
    cross_camera_filter: bool = True
    renormalize_after_ccr: bool = False
    seed: int = 0
    precision: str = "f32"
    workers: int = 1
    deterministic: bool = True

    def validate(self) -> None:
        self.stream.validate()
        self.contrastive.validate()
        if self.n_identities < 2 or self.n_cameras < 2:
            raise InvalidInputError("need >= 2 identities and >= 2 cameras")
        if len(self.encoder_dims) < 2 or self.encoder_dims[0] != self.stream.d_obs:
            raise InvalidInputError("encoder_dims must start at d_obs and have >= 2 layers")
        if self.min_len < 1:
            raise InvalidInputError("min_len must be >= 1")
        if self.min_affinity is not None and not -1.0 <= self.min_affinity <= 1.0:
            raise InvalidInputError("min_affinity must lie in [-1, 1] or be None")
        if self.ccr_k is not None and not 1 <= self.ccr_k <= self.n_cameras:
            raise InvalidInputError("ccr_k must lie in [1, n_cameras]")
        if not 0.0 < self.query_frac < 1.0 or not 0.0 < self.eval_window_frac < 1.0:
            raise InvalidInputError("query_frac and eval_window_frac must lie in (0, 1)")
        if self.precision not in ("f32", "f64"):
            raise InvalidInputError("precision must be 'f32' or 'f64'")
        if self.workers < 1:
            raise InvalidInputError("workers must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_payload(self) -> dict:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "stream": dataclasses.asdict(self.stream),
            "contrastive": dataclasses.asdict(self.contrastive),
        }
        for f in dataclasses.fields(self):
            if f.name in ("stream", "contrastive"):
                continue
            value = getattr(self, f.name)
            payload[f.name] = list(value) if isinstance(value, tuple) else value
        return payload

    @staticmethod
    def from_payload(payload: dict) -> "PipelineConfig":
        payload = dict(payload)
        version = payload.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise InvalidInputError(f"unsupported config schema_version {version}")
        known = {f.name for f in dataclasses.fields(PipelineConfig)}
        unknown = set(payload) - known
        if unknown:
            raise InvalidInputError(f"unknown config fields: {sorted(unknown)}")
        kwargs = {}
        if "stream" in payload:
            kwargs["stream"] = synth.StreamConfig(**payload.pop("stream"))
        if "contrastive" in payload:
            kwargs["contrastive"] = ctr.ContrastiveConfig(**payload.pop("contrastive"))
        for name, value in payload.items():
            if name == "encoder_dims":
                value = tuple(value)
            kwargs[name] = value
        config = PipelineConfig(**kwargs)
        config.validate()
        return config

    def fingerprint(self) -> str:
        return storage.fingerprint_payload(self.to_payload())

    def with_overrides(self, **kwargs) -> "PipelineConfig":
        return dataclasses.replace(self, **kwargs)


@dataclass
class Benchmark:
    world: synth.SyntheticWorld
    train: synth.DetectionTable  # gt stripped
    query: synth.DetectionTable
    gallery: synth.DetectionTable
    gt_by_det: dict[int, int]  # diagnostics and evaluation only


@dataclass
class PipelineResult:
    config: PipelineConfig
    bench: Benchmark
    pair_cid: enc.EncoderPair
    pair_tsd: enc.EncoderPair
    segments: list[trk.TrackletSegment]
    classifier: ccr_mod.CameraClassifier
    projector: ccr_mod.CcrProjector
    cid_stats: list[ctr.TrainStats]
    tsd_stats: list[ctr.TrainStats]
    report: ev.EvalReport
    wall_time: float


def build_benchmark(config: PipelineConfig) -> Benchmark:
    """Generate world and stream, then carve the fixed evaluation split."""
    config.validate()
    world = synth.generate_world(config.stream, config.n_identities, config.n_cameras, config.seed)
    stream = synth.simulate_stream(world)
    full = synth.DetectionTable.from_frames(stream)
    gt_by_det = {int(d): int(g) for d, g in zip(full.det_id, full.gt_id)}
    query, gallery = synth.split_eval(world, stream, config.query_frac, config.eval_window_frac)
    train = synth.training_table(world, stream, config.eval_window_frac)
    dtype = config.dtype
    return Benchmark(
        world=world,
        train=train.astype(dtype),
        query=query.astype(dtype),
        gallery=gallery.astype(dtype),
        gt_by_det=gt_by_det,
    )


def embed_all(params: enc.EncoderParams, observations: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    obs = np.asarray(observations).astype(params.dtype, copy=False)
    if obs.shape[0] == 0:
        return np.zeros((0, params.dims[-1]), dtype=params.dtype)
    parts = [enc.forward(params, obs[s : s + batch_size]) for s in range(0, obs.shape[0], batch_size)]
    return np.concatenate(parts, axis=0)


def train_cid(config: PipelineConfig, observations: np.ndarray) -> tuple[enc.EncoderPair, list[ctr.TrainStats]]:
    """Instance-discrimination stage from a fresh encoder and empty bank."""
    cc = config.contrastive
    pair = enc.init_encoder(
        config.encoder_dims,
        seed=derive_seed(config.seed, _SALT_CID_INIT),
        dtype=config.dtype,
        momentum=cc.key_momentum,
    )
    bank = ctr.MemoryBank(cc.bank_size, config.encoder_dims[-1], dtype=config.dtype)
    optim = enc.OptimState.for_params(pair.query, cc.base_lr, cc.sgd_momentum, cc.weight_decay)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, _SALT_CID_RNG])))
    stats = []
    for epoch in range(cc.epochs_cid):
        stats.append(ctr.cid_epoch(pair, bank, observations, cc, optim, rng, epoch=epoch))
    return pair, stats


def mine_segments(
    config: PipelineConfig,
    train: synth.DetectionTable,
    embeddings: np.ndarray,
    min_len: int | None = None,
) -> list[trk.TrackletSegment]:
    segments = trk.assemble_segments(train, embeddings, min_affinity=config.min_affinity)
    return trk.filter_segments(segments, config.min_len if min_len is None else min_len)


def train_tsd(
    config: PipelineConfig,
    init_pair: enc.EncoderPair,
    segments: list[trk.TrackletSegment],
    train: synth.DetectionTable,
) -> tuple[enc.EncoderPair, list[ctr.TrainStats]]:
    """Segment-discrimination stage; starts from the given weights, fresh bank."""
    cc = config.contrastive
    det_index = {int(d): i for i, d in enumerate(train.det_id)}
    rows = trk.segments_to_rows(segments, det_index)
    pair = enc.EncoderPair(
        query=init_pair.query.copy(), key=init_pair.query.copy(), momentum=cc.key_momentum
    )
    bank = ctr.MemoryBank(cc.bank_size, config.encoder_dims[-1], dtype=config.dtype)
    optim = enc.OptimState.for_params(pair.query, cc.base_lr, cc.sgd_momentum, cc.weight_decay)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, _SALT_TSD_RNG])))
    stats = []
    for epoch in range(cc.epochs_tsd):
        stats.append(
            ctr.tsd_epoch(pair, bank, rows, train.observations, cc, optim, rng, epoch=epoch)
        )
    return pair, stats


def fit_ccr(
    config: PipelineConfig, params: enc.EncoderParams, train: synth.DetectionTable
) -> tuple[ccr_mod.CameraClassifier, ccr_mod.CcrProjector]:
    """Fit the camera head on frozen embeddings of the training detections.

    Only cameras that appear in the table get a classifier row (labels are
    remapped to a dense range first); a small time slice may not cover all
    of them.  The reduction can only suppress evidence for cameras it has
    seen, so k is capped at that count.
    """
    embeddings = embed_all(params, train.observations)
    present = np.unique(np.asarray(train.camera_id))
    dense_labels = np.searchsorted(present, np.asarray(train.camera_id))
    classifier = ccr_mod.fit_camera_classifier(
        embeddings,
        dense_labels,
        seed=derive_seed(config.seed, _SALT_CCR),
    )
    k = min(config.ccr_k or len(present), len(present))
    if config.ccr_k is not None and k != config.ccr_k:
        log.info("ccr_k capped at %d: only %d cameras present", k, len(present))
    projector = ccr_mod.build_projector(classifier, k=k)
    return classifier, projector


def eval_report(
    config: PipelineConfig,
    bench: Benchmark,
    params: enc.EncoderParams,
    projector: ccr_mod.CcrProjector | None,
    arm: str,
) -> ev.EvalReport:
    protocol = ev.EvalProtocol(
        query=bench.query,
        gallery=bench.gallery,
        cross_camera_filter=config.cross_camera_filter,
    )
    fingerprint = storage.fingerprint_payload(
        {"config": config.to_payload(), "arm": arm, "use_ccr": projector is not None}
    )
    return ev.evaluate(
        params,
        projector,
        protocol,
        fingerprint=fingerprint,
        renormalize=config.renormalize_after_ccr,
    )


def random_pair(config: PipelineConfig) -> enc.EncoderPair:
    """Untrained encoder used for the segment-only training arm."""
    return enc.init_encoder(
        config.encoder_dims,
        seed=derive_seed(config.seed, _SALT_RANDOM_INIT),
        dtype=config.dtype,
        momentum=config.contrastive.key_momentum,
    )


def run_pipeline(config: PipelineConfig, bench: Benchmark | None = None) -> PipelineResult:
    """Default full run: instance stage, mining, segment stage, reduction, eval."""
    t0 = time.perf_counter()
    if bench is None:
        bench = build_benchmark(config)
    pair_cid, cid_stats = train_cid(config, bench.train.observations)
    embeddings = embed_all(pair_cid.query, bench.train.observations)
    segments = mine_segments(config, bench.train, embeddings)
    pair_tsd, tsd_stats = train_tsd(config, pair_cid, segments, bench.train)
    classifier, projector = fit_ccr(config, pair_tsd.query, bench.train)
    report = eval_report(config, bench, pair_tsd.query, projector, arm="cid+tsd+ccr")
    return PipelineResult(
        config=config,
        bench=bench,
        pair_cid=pair_cid,
        pair_tsd=pair_tsd,
        segments=segments,
        classifier=classifier,
        projector=projector,
        cid_stats=cid_stats,
        tsd_stats=tsd_stats,
        report=report,
        wall_time=time.perf_counter() - t0,
    )


def run_steps_ablation(config: PipelineConfig, bench: Benchmark | None = None) -> dict[str, ev.EvalReport]:
    """Evaluate the four pipeline arms, sharing work where the arms overlap.

    'cid' evaluates the instance stage alone; 'tsd' mines segments with an
    untrained encoder and trains the segment stage from scratch; 'cid+tsd'
    chains the stages; 'cid+tsd+ccr' adds the camera reduction.
    """
    if bench is None:
        bench = build_benchmark(config)
    reports: dict[str, ev.EvalReport] = {}

    pair_cid, _ = train_cid(config, bench.train.observations)
    reports["cid"] = eval_report(config, bench, pair_cid.query, None, arm="cid")

    rnd = random_pair(config)
    seg_rnd = mine_segments(config, bench.train, embed_all(rnd.query, bench.train.observations))
    pair_tsd_only, _ = train_tsd(config, rnd, seg_rnd, bench.train)
    reports["tsd"] = eval_report(config, bench, pair_tsd_only.query, None, arm="tsd")

    seg_cid = mine_segments(config, bench.train, embed_all(pair_cid.query, bench.train.observations))
    pair_both, _ = train_tsd(config, pair_cid, seg_cid, bench.train)
    reports["cid+tsd"] = eval_report(config, bench, pair_both.query, None, arm="cid+tsd")

    _, projector = fit_ccr(config, pair_both.query, bench.train)
    reports["cid+tsd+ccr"] = eval_report(config, bench, pair_both.query, projector, arm="cid+tsd+ccr")
    return reports


def slice_fraction(config: PipelineConfig, train: synth.DetectionTable, fraction: float) -> synth.DetectionTable:
    """Contiguous leading time slice of the training window."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidInputError("fraction must lie in (0, 1]")
    window = synth.eval_window_start(config.stream, config.eval_window_frac)
    cutoff = max(int(np.ceil(fraction * window)), 1)
    return train.select(train.frame < cutoff)


def run_fraction_arm(config: PipelineConfig, bench: Benchmark, fraction: float) -> ev.EvalReport:
    """Full pipeline trained on a time slice, scored on the unchanged split."""
    sliced = slice_fraction(config, bench.train, fraction)
    pair_cid, _ = train_cid(config, sliced.observations)
    segments = mine_segments(config, sliced, embed_all(pair_cid.query, sliced.observations))
    pair_tsd, _ = train_tsd(config, pair_cid, segments, sliced)
    _, projector = fit_ccr(config, pair_tsd.query, sliced)
    return eval_report(config, bench, pair_tsd.query, projector, arm=f"fraction={fraction}")


def ablation_min_len(
    config: PipelineConfig, values=MIN_LEN_VALUES, bench: Benchmark | None = None
) -> list[dict]:
    """Sweep the segment length threshold; reports purity and retrieval."""
    if bench is None:
        bench = build_benchmark(config)
    pair_cid, _ = train_cid(config, bench.train.observations)
    embeddings = embed_all(pair_cid.query, bench.train.observations)
    raw = trk.assemble_segments(bench.train, embeddings, min_affinity=config.min_affinity)
    rows = []
    for min_len in values:
        kept = trk.filter_segments(raw, min_len)
        stats = trk.segment_stats(kept, bench.gt_by_det)
        pair_tsd, _ = train_tsd(config, pair_cid, kept, bench.train)
        report = eval_report(config, bench, pair_tsd.query, None, arm=f"min_len={min_len}")
        rows.append(
            {
                "min_len": int(min_len),
                "n_segments": stats.n_segments,
                "purity": stats.purity,
                "rank1": report.rank1,
                "mean_ap": report.mean_ap,
            }
        )
    return rows


def ablation_data_fraction(
    config: PipelineConfig, values=DATA_FRACTIONS, bench: Benchmark | None = None
) -> list[dict]:
    """Sweep contiguous time slices of the training window.

    The whole grid runs with a reduced batch and bank so the smallest slice
    can still form full batches; the override is uniform across fractions to
    keep the points comparable.
    """
    if bench is None:
        bench = build_benchmark(config)
    small = dataclasses.replace(config.contrastive, batch_size=64, bank_size=1024)
    config = config.with_overrides(contrastive=small)
    rows = []
    for fraction in values:
        report = run_fraction_arm(config, bench, fraction)
        rows.append(
            {
                "data_fraction": float(fraction),
                "n_train": int(len(slice_fraction(config, bench.train, fraction))),
                "rank1": report.rank1,
                "mean_ap": report.mean_ap,
            }
        )
    return rows


def ablation_steps(config: PipelineConfig, bench: Benchmark | None = None) -> list[dict]:
    reports = run_steps_ablation(config, bench)
    return [
        {"steps": arm, "rank1": reports[arm].rank1, "mean_ap": reports[arm].mean_ap}
        for arm in STEP_ARMS
    ]


def ablation_model_size(
    config: PipelineConfig, values=MODEL_SIZES, bench: Benchmark | None = None
) -> list[dict]:
    if bench is None:
        bench = build_benchmark(config)
    rows = []
    for dims in values:
        cfg = config.with_overrides(encoder_dims=tuple(int(d) for d in dims))
        cfg.validate()
        result = run_pipeline(cfg, bench=bench)
        rows.append(
            {
                "encoder_dims": "x".join(str(d) for d in dims),
                "n_params": int(
                    sum(w.size for w in result.pair_tsd.query.weights)
                    + sum(b.size for b in result.pair_tsd.query.biases)
                ),
                "rank1": result.report.rank1,
                "mean_ap": result.report.mean_ap,
            }
        )
    return rows


def ablation_grid(config: PipelineConfig, axis: str, values=None, bench: Benchmark | None = None) -> list[dict]:
    """Dispatch one ablation axis; values=None uses the axis defaults."""
    if axis == "steps":
        return ablation_steps(config, bench=bench)
    if axis == "min_len":
        return ablation_min_len(config, values or MIN_LEN_VALUES, bench=bench)
    if axis == "data_fraction":
        return ablation_data_fraction(config, values or DATA_FRACTIONS, bench=bench)
    if axis == "model_size":
        return ablation_model_size(config, values or MODEL_SIZES, bench=bench)
    raise InvalidInputError(f"unknown ablation axis '{axis}'")


# ---------------------------------------------------------------------------
# File-backed stages
# ---------------------------------------------------------------------------


def _producer_guard(stage_dir: Path, digests: dict[str, str], fp: str, force: bool) -> bool:
    """Returns True when the stage may be skipped; raises instead of overwriting."""
    if storage.manifest_matches(stage_dir, digests, fp):
        log.info("skipping %s (manifest hit)", stage_dir.name)
        return True
    if (stage_dir / "manifest.json").exists() and not force:
        raise ManifestError(
            f"{stage_dir} holds results from a different run; pass --force to overwrite"
        )
    stage_dir.mkdir(parents=True, exist_ok=True)
    return False


def write_config(root: Path, config: PipelineConfig, force: bool = False) -> None:
    root.mkdir(parents=True, exist_ok=True)
    path = root / "config.json"
    payload = config.to_payload()
    if path.exists():
        existing = json.loads(path.read_text())
        if existing != payload and not force:
            raise ManifestError(f"{path} disagrees with the requested config; pass --force")
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_config(root: Path) -> PipelineConfig:
    path = root / "config.json"
    if not path.exists():
        raise ManifestError(f"missing {path}; run the simulate stage first")
    return PipelineConfig.from_payload(json.loads(path.read_text()))


def _table_records(table: synth.DetectionTable) -> list[dict]:
    return [
        {
            "det_id": int(table.det_id[i]),
            "frame": int(table.frame[i]),
            "camera_id": int(table.camera_id[i]),
            "gt_id": int(table.gt_id[i]),
            "ghost": int(table.ghost[i]),
        }
        for i in range(len(table))
    ]


def stage_simulate(root: Path, config: PipelineConfig, force: bool = False) -> bool:
    stage_dir = root / "sim"
    fp = config.fingerprint()
    if _producer_guard(stage_dir, {}, fp, force):
        return False
    bench = build_benchmark(config)
    world = bench.world
    stream = synth.simulate_stream(world)
    full = synth.DetectionTable.from_frames(stream).astype(config.dtype)
    storage.write_records(stage_dir / "detections.jsonl", _table_records(full))
    storage.write_tensors(
        stage_dir / "observations.rctr",
        {"det_ids": full.det_id, "observations": full.observations},
    )
    storage.write_records(
        stage_dir / "query_ids.jsonl", [{"det_id": int(d)} for d in bench.query.det_id]
    )
    storage.write_records(
        stage_dir / "gallery_ids.jsonl", [{"det_id": int(d)} for d in bench.gallery.det_id]
    )
    outputs = [
        stage_dir / "detections.jsonl",
        stage_dir / "observations.rctr",
        stage_dir / "query_ids.jsonl",
        stage_dir / "gallery_ids.jsonl",
    ]
    storage.write_manifest(
        stage_dir, "simulate", {}, outputs, fp, extra={"n_detections": len(full)}
    )
    return True


def load_full_table(root: Path, config: PipelineConfig) -> synth.DetectionTable:
    """Full detection table with gt labels; evaluation-side readers only."""
    recs = storage.read_records(root / "sim" / "detections.jsonl")
    tens = storage.read_tensors(root / "sim" / "observations.rctr")
    det_id = np.array([r["det_id"] for r in recs], dtype=np.int64)
    if not np.array_equal(det_id, tens["det_ids"]):
        raise ManifestError("detections.jsonl and observations.rctr disagree on det_ids")
    return synth.DetectionTable(
        det_id=det_id,
        frame=[r["frame"] for r in recs],
        camera_id=[r["camera_id"] for r in recs],
        gt_id=[r["gt_id"] for r in recs],
        observations=tens["observations"].astype(config.dtype, copy=False),
        ghost=[r["ghost"] for r in recs],
    )


def load_train_table(root: Path, config: PipelineConfig) -> synth.DetectionTable:
    """Training-window detections with gt stripped; the training stages' reader."""
    full = load_full_table(root, config)
    start = synth.eval_window_start(config.stream, config.eval_window_frac)
    return full.select(full.frame < start).without_gt()


def load_eval_split(root: Path, config: PipelineConfig) -> tuple[synth.DetectionTable, synth.DetectionTable]:
    full = load_full_table(root, config)
    by_id = {int(d): i for i, d in enumerate(full.det_id)}
    out = []
    for name in ("query_ids.jsonl", "gallery_ids.jsonl"):
        ids = [r["det_id"] for r in storage.read_records(root / "sim" / name)]
        out.append(full.select(np.array([by_id[i] for i in ids], dtype=np.int64)))
    return out[0], out[1]


def save_checkpoint(stage_dir: Path, pair: enc.EncoderPair, config: PipelineConfig, stage: str) -> list[Path]:
    tensors = {}
    for side, params in (("query", pair.query), ("key", pair.key)):
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            tensors[f"{side}.w{i}"] = w
            tensors[f"{side}.b{i}"] = b
    rctr = stage_dir / "checkpoint.rctr"
    meta = stage_dir / "checkpoint.json"
    storage.write_tensors(rctr, tensors)
    meta.write_text(
        json.dumps(
            {
                "dims": list(pair.query.dims),
                "dtype": config.precision,
                "key_momentum": pair.momentum,
                "seed": config.seed,
                "stage": stage,
            },
            indent=2,
            sort_keys=True,
        )
    )
    return [rctr, meta]


def load_checkpoint(stage_dir: Path) -> enc.EncoderPair:
    meta_path = stage_dir / "checkpoint.json"
    if not meta_path.exists():
        raise ManifestError(f"missing checkpoint metadata {meta_path}")
    meta = json.loads(meta_path.read_text())
    tensors = storage.read_tensors(stage_dir / "checkpoint.rctr")
    dims = tuple(meta["dims"])
    sides = {}
    for side in ("query", "key"):
        weights = [tensors[f"{side}.w{i}"] for i in range(len(dims) - 1)]
        biases = [tensors[f"{side}.b{i}"] for i in range(len(dims) - 1)]
        sides[side] = enc.EncoderParams(dims=dims, weights=weights, biases=biases)
    return enc.EncoderPair(query=sides["query"], key=sides["key"], momentum=meta["key_momentum"])


def _curves(stats: list[ctr.TrainStats]) -> list[dict]:
    return [
        {
            "epoch": s.epoch,
            "mean_loss": s.mean_loss,
            "lr": s.lr,
            "bank_occupancy": s.bank_occupancy,
            "wall_time": s.wall_time,
        }
        for s in stats
    ]


def stage_train_cid(root: Path, config: PipelineConfig, force: bool = False) -> bool:
    stage_dir = root / "cid"
    digests = storage.validate_inputs(
        {
            "detections": root / "sim" / "detections.jsonl",
            "observations": root / "sim" / "observations.rctr",
        }
    )
    fp = config.fingerprint()
    if _producer_guard(stage_dir, digests, fp, force):
        return False
    train = load_train_table(root, config)
    pair, stats = train_cid(config, train.observations)
    outputs = save_checkpoint(stage_dir, pair, config, "cid")
    storage.write_records(stage_dir / "curves.jsonl", _curves(stats))
    outputs.append(stage_dir / "curves.jsonl")
    storage.write_manifest(stage_dir, "train-cid", digests, outputs, fp)
    return True


def stage_extract(root: Path, config: PipelineConfig, force: bool = False, checkpoint: str = "cid") -> bool:
    stage_dir = root / "embed"
    digests = storage.validate_inputs(
        {
            "observations": root / "sim" / "observations.rctr",
            "checkpoint": root / checkpoint / "checkpoint.rctr",
        }
    )
    fp = config.fingerprint()
    if _producer_guard(stage_dir, digests, fp, force):
        return False
    train = load_train_table(root, config)
    pair = load_checkpoint(root / checkpoint)
    emb = embed_all(pair.query, train.observations)
    storage.write_tensors(
        stage_dir / "embeddings.rctr", {"det_ids": train.det_id, "embeddings": emb}
    )
    storage.write_manifest(
        stage_dir, "extract", digests, [stage_dir / "embeddings.rctr"], fp
    )
    return True


def stage_trackletize(root: Path, config: PipelineConfig, force: bool = False) -> bool:
    stage_dir = root / "segments"
    digests = storage.validate_inputs(
        {
            "detections": root / "sim" / "detections.jsonl",
            "embeddings": root / "embed" / "embeddings.rctr",
        }
    )
    fp = config.fingerprint()
    if _producer_guard(stage_dir, digests, fp, force):
        return False
    train = load_train_table(root, config)
    tens = storage.read_tensors(root / "embed" / "embeddings.rctr")
    if not np.array_equal(tens["det_ids"], train.det_id):
        raise ManifestError("embeddings do not align with the training detections")
    segments = mine_segments(config, train, tens["embeddings"])
    storage.write_records(
        stage_dir / "segments.jsonl",
        [
            {
                "segment_id": s.segment_id,
                "camera_id": s.camera_id,
                "first_frame": s.first_frame,
                "det_ids": list(s.det_ids),
            }
            for s in segments
        ],
    )
    lengths = {}
    per_camera = {}
    for s in segments:
        lengths[len(s)] = lengths.get(len(s), 0) + 1
        per_camera[s.camera_id] = per_camera.get(s.camera_id, 0) + 1
    (stage_dir / "stats.json").write_text(
        json.dumps(
            {
                "n_segments": len(segments),
                "length_hist": {str(k): v for k, v in sorted(lengths.items())},
                "per_camera": {str(k): v for k, v in sorted(per_camera.items())},
                "min_len": config.min_len,
            },
            indent=2,
            sort_keys=True,
        )
    )
    storage.write_manifest(
        stage_dir,
        "trackletize",
        digests,
        [stage_dir / "segments.jsonl", stage_dir / "stats.json"],
        fp,
    )
    return True


def load_segments(root: Path) -> list[trk.TrackletSegment]:
    recs = storage.read_records(root / "segments" / "segments.jsonl")
    return [
        trk.TrackletSegment(
            segment_id=r["segment_id"],
            camera_id=r["camera_id"],
            det_ids=tuple(r["det_ids"]),
            first_frame=r["first_frame"],
        )
        for r in recs
    ]


def stage_train_tsd(root: Path, config: PipelineConfig, force: bool = False) -> bool:
    stage_dir = root / "tsd"
    digests = storage.validate_inputs(
        {
            "observations": root / "sim" / "observations.rctr",
            "segments": root / "segments" / "segments.jsonl",
            "init": root / "cid" / "checkpoint.rctr",
        }
    )
    fp = config.fingerprint()
    if _producer_guard(stage_dir, digests, fp, force):
        return False
    train = load_train_table(root, config)
    init_pair = load_checkpoint(root / "cid")
    segments = load_segments(root)
    pair, stats = train_tsd(config, init_pair, segments, train)
    outputs = save_checkpoint(stage_dir, pair, config, "tsd")
    storage.write_records(stage_dir / "curves.jsonl", _curves(stats))
    outputs.append(stage_dir / "curves.jsonl")
    storage.write_manifest(stage_dir, "train-tsd", digests, outputs, fp)
    return True


def stage_fit_ccr(root: Path, config: PipelineConfig, force: bool = False) -> bool:
    stage_dir = root / "ccr"
    digests = storage.validate_inputs(
        {
            "observations": root / "sim" / "observations.rctr",
            "checkpoint": root / "tsd" / "checkpoint.rctr",
        }
    )
    fp = config.fingerprint()
    if _producer_guard(stage_dir, digests, fp, force):
        return False
    train = load_train_table(root, config)
    pair = load_checkpoint(root / "tsd")
    classifier, projector = fit_ccr(config, pair.query, train)
    storage.write_tensors(
        stage_dir / "projector.rctr",
        {
            "v": projector.v,
            "centering": projector.centering,
            "classifier_w": classifier.weight,
        },
    )
    (stage_dir / "projector.json").write_text(
        json.dumps(
            {
                "k": projector.k,
                "m": projector.m,
                "n": projector.n,
                "holdout_accuracy": classifier.holdout_accuracy,
            },
            indent=2,
            sort_keys=True,
        )
    )
    storage.write_manifest(
        stage_dir,
        "fit-ccr",
        digests,
        [stage_dir / "projector.rctr", stage_dir / "projector.json"],
        fp,
    )
    return True


def load_projector(root: Path) -> ccr_mod.CcrProjector:
    tens = storage.read_tensors(root / "ccr" / "projector.rctr")
    meta_path = root / "ccr" / "projector.json"
    if not meta_path.exists():
        raise ManifestError(f"missing projector metadata {meta_path}")
    meta = json.loads(meta_path.read_text())
    return ccr_mod.CcrProjector(
        v=tens["v"], centering=tens["centering"], k=meta["k"], m=meta["m"], n=meta["n"]
    )


def stage_evaluate(
    root: Path,
    config: PipelineConfig,
    force: bool = False,
    checkpoint: str = "tsd",
    use_ccr: bool = True,
) -> bool:
    stage_dir = root / "eval"
    inputs = {
        "detections": root / "sim" / "detections.jsonl",
        "observations": root / "sim" / "observations.rctr",
        "checkpoint": root / checkpoint / "checkpoint.rctr",
    }
    if use_ccr:
        inputs["projector"] = root / "ccr" / "projector.rctr"
    digests = storage.validate_inputs(inputs)
    fp = config.fingerprint()
    if _producer_guard(stage_dir, digests, fp, force):
        return False
    query, gallery = load_eval_split(root, config)
    pair = load_checkpoint(root / checkpoint)
    projector = load_projector(root) if use_ccr else None
    protocol = ev.EvalProtocol(
        query=query, gallery=gallery, cross_camera_filter=config.cross_camera_filter
    )
    fingerprint = storage.fingerprint_payload(
        {"config": config.to_payload(), "checkpoint": checkpoint, "use_ccr": use_ccr}
    )
    report = ev.evaluate(
        pair.query,
        projector,
        protocol,
        fingerprint=fingerprint,
        renormalize=config.renormalize_after_ccr,
    )
    (stage_dir / "report.json").write_text(report.to_json())
    (stage_dir / "report.txt").write_text(report.to_text() + "\n")
    storage.write_manifest(
        stage_dir,
        "evaluate",
        digests,
        [stage_dir / "report.json", stage_dir / "report.txt"],
        fp,
        extra={"checkpoint": checkpoint, "use_ccr": use_ccr},
    )
    return True


def stage_run_all(root: Path, config: PipelineConfig, force: bool = False) -> None:
    stage_simulate(root, config, force)
    stage_train_cid(root, config, force)
    stage_extract(root, config, force)
    stage_trackletize(root, config, force)
    stage_train_tsd(root, config, force)
    stage_fit_ccr(root, config, force)
    stage_evaluate(root, config, force)


def stage_ablate(root: Path, config: PipelineConfig, axis: str, values=None, force: bool = False) -> list[dict]:
    stage_dir = root / "ablation"
    stage_dir.mkdir(parents=True, exist_ok=True)
    out_jsonl = stage_dir / f"{axis}.jsonl"
    out_series = stage_dir / f"{axis}.series"
    if (out_jsonl.exists() or out_series.exists()) and not force:
        raise ManifestError(f"{stage_dir}/{axis}.* already exists; pass --force to overwrite")
    rows = ablation_grid(config, axis, values)
    storage.write_records(out_jsonl, rows)
    cols = list(rows[0].keys())
    lines = ["# " + "\t".join(cols)]
    for row in rows:
        lines.append("\t".join(str(row[c]) for c in cols))
    out_series.write_text("\n".join(lines) + "\n")
    return rows
