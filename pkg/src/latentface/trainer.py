"""Two-stage training orchestration: runs, ledgers, checkpoints, resume.

A run owns one output directory (lock file) holding `config.json`,
`ledger.jsonl` (append-only records per epoch), `checkpoints/` and
`reports/`. Stage 1 trains the face generator on features extracted from
real audio; stage 2 fine-tunes on teacher-forced text-model predictions
regenerated each epoch with the frozen text model, hard-failing if any
predicted condition length disagrees with the video length.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import checkpoint as ckpt
from .config import CONDITION_EXTRACTED, CONDITION_TEACHER_FORCED, RunConfig
from .corpus import Corpus
from .errors import AlignmentError, ConfigError, DependencyError
from .experts import load_expert, _sample_offset
from .features import (
    FEATURE_VERSION,
    FeatureSequence,
    SOURCE_EXTRACTED,
    SOURCE_TEACHER_FORCED,
    load_cached_features,
)
from .mas import mas_align
from .metrics import lse
from .tfg import (
    COND_WINDOW,
    DivergenceGuard,
    Discriminator,
    FaceWindow,
    Generator,
    TFG_VERSION,
    WINDOW,
    discriminator_step,
    generate_clip,
    mask_lower_half,
    silent_reference,
    tfg_losses,
)
from .ttv import infer_teacher_forced, load_ttv
from .utils import configure_torch, derive_seed, read_json, rng_for, write_json


@dataclass
class ArtifactPaths:
    """Standard artifact layout under one home directory."""

    home: Path
    corpus_override: Path = None

    def __post_init__(self):
        self.home = Path(self.home)
        if self.corpus_override is not None:
            self.corpus_override = Path(self.corpus_override)

    @property
    def corpus_dir(self) -> Path:
        return self.corpus_override if self.corpus_override is not None else self.home / "corpus"

    def expert_dir(self, kind: str) -> Path:
        return self.home / "experts" / kind

    @property
    def ttv_dir(self) -> Path:
        return self.home / "ttv"

    @property
    def ttv_checkpoint(self) -> Path:
        return self.ttv_dir / "checkpoint"

    @property
    def synth_dir(self) -> Path:
        return self.home / "synth"

    @property
    def synth_checkpoint(self) -> Path:
        return self.synth_dir / "checkpoint"

    def tfg_run_dir(self, seed: int) -> Path:
        return self.home / "tfg" / f"seed{seed}"

    def tfg_checkpoint(self, seed: int, tag: str) -> Path:
        return self.tfg_run_dir(seed) / "checkpoints" / tag

    @property
    def reports_dir(self) -> Path:
        return self.home / "reports"


class RunLedger:
    """Append-only JSONL record stream for one run directory."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / "ledger.jsonl"

    def append(self, record: dict) -> None:
        record = dict(record)
        record.setdefault("ts", time.time())
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def records(self) -> list:
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def last_epoch(self, phase: str):
        epochs = [r["epoch"] for r in self.records() if r.get("phase") == phase and "epoch" in r]
        return max(epochs) if epochs else None

    def is_complete(self, phase: str) -> bool:
        return any(
            r.get("phase") == phase and r.get("event") == "complete" for r in self.records()
        )


def _require(path: Path, what: str) -> None:
    if not Path(path).exists():
        raise DependencyError(f"missing required artifact: {what} at {path}")


def open_corpus(paths: ArtifactPaths) -> Corpus:
    _require(paths.corpus_dir / "manifest.json", "corpus manifest")
    corpus = Corpus(paths.corpus_dir)
    if corpus.manifest.get("feature_version") != FEATURE_VERSION:
        raise DependencyError(
            "feature cache missing or stale; run the corpus command (it caches features)"
        )
    return corpus


# ---------------------------------------------------------------------------
# conditioning providers

class ExtractedConditions:
    """Stage-1 conditioning: cached features from real audio."""

    source = SOURCE_EXTRACTED

    def __init__(self, corpus: Corpus, ids):
        self.features = {}
        for uid in ids:
            seq = load_cached_features(corpus, uid)
            if seq.source != SOURCE_EXTRACTED:
                raise AlignmentError(f"expected extracted features for {uid}")
            self._check_length(corpus, uid, seq)
            self.features[uid] = seq

    @staticmethod
    def _check_length(corpus, uid, seq):
        n = corpus.n_frames(uid)
        if len(seq) != 2 * n:
            raise AlignmentError(
                f"condition length {len(seq)} != 2 x {n} video frames for {uid}"
            )

    def refresh(self, epoch: int) -> None:  # static source
        del epoch

    def get(self, uid: str) -> FeatureSequence:
        return self.features[uid]


class TeacherForcedConditions:
    """Stage-2 conditioning: regenerated each epoch with the frozen text model."""

    source = SOURCE_TEACHER_FORCED

    def __init__(self, corpus: Corpus, ids, ttv_model, duration_source: str = "corpus"):
        self.corpus = corpus
        self.ids = list(ids)
        self.ttv = ttv_model
        self.duration_source = duration_source
        self.features = {}

    def _durations(self, uid: str) -> np.ndarray:
        meta = self.corpus.meta(uid)
        if self.duration_source == "corpus":
            return 2 * np.asarray(meta["durations_frames"], dtype=np.int64)
        feats = load_cached_features(self.corpus, uid).values
        with torch.no_grad():
            _, mu_p, ls_p = self.ttv.text_encoder(
                torch.from_numpy(np.asarray(meta["tokens"], dtype=np.int64))[None]
            )
            mu_q, _ = self.ttv.posterior_encoder(
                torch.from_numpy(feats.astype(np.float32)).T[None]
            )
        path = mas_align(mu_q[0].T.numpy(), mu_p[0].T.numpy(), ls_p[0].T.numpy())
        return path.durations

    def refresh(self, epoch: int) -> None:
        del epoch  # deterministic at temperature 0; recomputed for freshness
        self.features = {}
        for uid in self.ids:
            meta = self.corpus.meta(uid)
            out = infer_teacher_forced(self.ttv, meta["tokens"], self._durations(uid))
            if out.features.source != SOURCE_TEACHER_FORCED:
                raise AlignmentError(f"stage-2 condition for {uid} lost its source tag")
            n = self.corpus.n_frames(uid)
            if len(out.features) != 2 * n:
                raise AlignmentError(
                    f"stage-2 condition length {len(out.features)} != 2 x {n} for {uid}"
                )
            self.features[uid] = out.features

    def get(self, uid: str) -> FeatureSequence:
        return self.features[uid]


# ---------------------------------------------------------------------------
# TFG stage runner

def _collate_windows(windows):
    ref = torch.from_numpy(np.stack([w.silent_reference for w in windows])).permute(0, 3, 1, 2)
    masked = torch.from_numpy(np.stack([w.masked_frames for w in windows])).permute(0, 1, 4, 2, 3)
    target = torch.from_numpy(np.stack([w.target_frames for w in windows])).permute(0, 1, 4, 2, 3)
    cond = torch.from_numpy(np.stack([w.condition for w in windows]))
    return ref, masked, target, cond


def _save_stage_state(path, gen, disc, gen_opt, disc_opt, meta):
    tensors = {}
    for prefix, module in (("gen", gen), ("disc", disc)):
        for name, arr in ckpt.module_tensors(module).items():
            tensors[f"{prefix}/{name}"] = arr
    for prefix, opt in (("ogen", gen_opt), ("odisc", disc_opt)):
        for name, arr in ckpt.optimizer_tensors(opt).items():
            tensors[f"{prefix}/{name}"] = arr
    return ckpt.save_checkpoint(path, tensors, TFG_VERSION, meta)


def _split_state(tensors, prefix):
    plen = len(prefix) + 1
    return {name[plen:]: arr for name, arr in tensors.items() if name.startswith(prefix + "/")}


def _load_stage_state(path, gen, disc, gen_opt=None, disc_opt=None):
    tensors, index = ckpt.load_checkpoint(path, expected_version=TFG_VERSION)
    ckpt.load_module(gen, _split_state(tensors, "gen"))
    ckpt.load_module(disc, _split_state(tensors, "disc"))
    if gen_opt is not None and any(n.startswith("ogen/") for n in tensors):
        ckpt.load_optimizer(gen_opt, _split_state(tensors, "ogen"))
    if disc_opt is not None and any(n.startswith("odisc/") for n in tensors):
        ckpt.load_optimizer(disc_opt, _split_state(tensors, "odisc"))
    return index["meta"]


def load_generator(path) -> Generator:
    configure_torch()
    tensors, _ = ckpt.load_checkpoint(path, expected_version=TFG_VERSION)
    gen = Generator()
    ckpt.load_module(gen, _split_state(tensors, "gen"))
    gen.eval()
    return gen


def _acquire_lock(run_dir: Path) -> FileLock:
    lock = FileLock(str(run_dir / ".lock"))
    try:
        lock.acquire(timeout=0.2)
    except Timeout:
        raise DependencyError(f"run directory {run_dir} is locked by another process")
    return lock


def _check_config(run_dir: Path, config: RunConfig) -> None:
    config_path = run_dir / "config.json"
    payload = {"config": config.to_dict(), "hash": config.config_hash()}
    if config_path.exists():
        existing = read_json(config_path)
        if existing.get("hash") != payload["hash"]:
            raise ConfigError(
                f"run directory {run_dir} was created with a different config; "
                "use a fresh --out directory"
            )
    else:
        write_json(config_path, payload)


def _run_tfg_stage(config: RunConfig, paths: ArtifactPaths, *, stage: int, variant: str = "full"):
    """Shared stage-1/stage-2 loop; returns the tagged checkpoint hash."""
    configure_torch()
    config.validate()
    corpus = open_corpus(paths)

    sync_expert, _ = load_expert(paths.expert_dir("sync"), "sync")
    for p in sync_expert.parameters():
        p.requires_grad_(False)
    pyramid, _ = load_expert(paths.expert_dir("perceptual"), "perceptual")

    train_ids = corpus.split_ids("train")
    if stage == 1:
        tag = "stage1"
        conditions = ExtractedConditions(corpus, train_ids)
        epochs, lr = config.tfg.stage1_epochs, config.tfg.stage1_lr
    else:
        tag = "stage2" if variant == "full" else "stage2_nosync"
        _require(paths.tfg_checkpoint(config.seed, "stage1") / "index.json", "stage-1 checkpoint")
        _require(paths.ttv_checkpoint / "index.json", "ttv checkpoint")
        ttv_model, _ = load_ttv(paths.ttv_checkpoint)
        for p in ttv_model.parameters():
            p.requires_grad_(False)
        conditions = TeacherForcedConditions(
            corpus, train_ids, ttv_model, config.stage2_duration_source
        )
        epochs, lr = config.tfg.stage2_epochs, config.tfg.stage2_lr

    run_dir = paths.tfg_run_dir(config.seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    lock = _acquire_lock(run_dir)
    try:
        _check_config(run_dir, config)
        ledger = RunLedger(run_dir)
        if ledger.is_complete(tag):
            return ckpt.checkpoint_hash(paths.tfg_checkpoint(config.seed, tag))

        torch.manual_seed(derive_seed("tfg-init", config.seed, tag))
        gen, disc = Generator(), Discriminator()
        gen_opt = torch.optim.Adam(gen.parameters(), lr=lr)
        disc_opt = torch.optim.Adam(disc.parameters(), lr=config.tfg.disc_lr if stage == 1 else lr)
        guard = DivergenceGuard(config.tfg)

        start_epoch = 0
        latest = run_dir / "checkpoints" / f"{tag}_latest"
        resumed_epoch = ledger.last_epoch(tag)
        if resumed_epoch is not None and (latest / "index.json").exists():
            meta = _load_stage_state(latest, gen, disc, gen_opt, disc_opt)
            start_epoch = int(meta["epoch"]) + 1
            guard.adv_weight = float(meta["adv_weight"])
            guard.streak = int(meta["guard_streak"])
        elif stage == 2:
            _load_stage_state(paths.tfg_checkpoint(config.seed, "stage1"), gen, disc)
            # fresh optimizers for fine-tuning
        if start_epoch == 0:
            ledger.append(
                {
                    "phase": tag,
                    "event": "data",
                    "utterance_ids": train_ids,
                    "config_hash": config.config_hash(),
                }
            )

        silent_refs = {
            uid: silent_reference(corpus, corpus.meta(uid)["speaker_id"]) for uid in train_ids
        }
        sync_weight = config.tfg.sync_weight_stage2 if variant == "full" else 0.0

        for epoch in range(start_epoch, epochs):
            t0 = time.time()
            conditions.refresh(epoch)
            rng = rng_for("tfg-epoch", config.seed, tag, epoch)
            order = rng.permutation(len(train_ids))
            window_plan = []
            for i in order:
                uid = train_ids[int(i)]
                n = corpus.n_frames(uid)
                for _ in range(config.tfg.windows_per_utterance):
                    window_plan.append((uid, int(rng.integers(0, n - WINDOW + 1))))

            sums = np.zeros(5)
            n_batches = 0
            guard_events = []
            for bi in range(0, len(window_plan), config.tfg.batch_size):
                chunk = window_plan[bi : bi + config.tfg.batch_size]
                windows, negs = [], []
                for uid, start in chunk:
                    seq = conditions.get(uid)
                    if seq.source != conditions.source:
                        raise AlignmentError("condition source tag mismatch in batch")
                    target = corpus.frame_window(uid, start, WINDOW)
                    window = FaceWindow(
                        target_frames=target,
                        masked_frames=mask_lower_half(target),
                        silent_reference=silent_refs[uid],
                        condition=seq.values[2 * start : 2 * start + COND_WINDOW],
                        utterance_id=uid,
                        start_frame=start,
                    )
                    windows.append(window)
                    n = corpus.n_frames(uid)
                    off = _sample_offset(rng, start, n, 5)
                    negs.append(seq.values[2 * (start + off) : 2 * (start + off) + COND_WINDOW])

                ref, masked, target, cond = _collate_windows(windows)
                neg = torch.from_numpy(np.stack(negs))

                gen.train()
                generated = gen(ref, masked, cond)
                d_loss, d_acc = discriminator_step(disc, disc_opt, generated, target)
                event = guard.update(d_acc)
                if event is not None:
                    guard_events.append(event)

                total, record = tfg_losses(
                    generated, target, disc, pyramid, sync_expert, cond,
                    neg if stage == 1 else None,
                    stage=stage, config=config.tfg, adv_weight=guard.adv_weight,
                    sync_weight=None if stage == 1 else sync_weight,
                )
                gen_opt.zero_grad()
                total.backward()
                gen_opt.step()
                sums += np.array(
                    [record.pixel_l1, record.perceptual, record.adv, record.sync, d_loss]
                )
                n_batches += 1

            means = sums / max(n_batches, 1)
            val = _quick_val(gen, corpus, conditions, sync_expert, silent_refs)
            state_meta = {
                "epoch": epoch,
                "stage": stage,
                "variant": variant,
                "adv_weight": guard.adv_weight,
                "guard_streak": guard.streak,
                "config_hash": config.config_hash(),
            }
            latest_hash = _save_stage_state(latest, gen, disc, gen_opt, disc_opt, state_meta)
            ledger.append(
                {
                    "phase": tag,
                    "epoch": epoch,
                    "losses": {
                        "pixel_l1": means[0], "perceptual": means[1], "adv": means[2],
                        "sync": means[3], "disc": means[4],
                    },
                    "val": val,
                    "checkpoint": latest_hash,
                    "guard_events": guard_events,
                    "adv_weight": guard.adv_weight,
                    "wall_time_s": time.time() - t0,
                }
            )

        final_meta = {
            "stage": stage,
            "variant": variant,
            "epochs": epochs,
            "seed": config.seed,
            "config_hash": config.config_hash(),
            "condition_source": conditions.source,
        }
        final_hash = _save_stage_state(
            paths.tfg_checkpoint(config.seed, tag), gen, disc, gen_opt, disc_opt, final_meta
        )
        ledger.append({"phase": tag, "event": "complete", "checkpoint": final_hash})
        return final_hash
    finally:
        lock.release()


def _quick_val(gen, corpus, conditions, sync_expert, silent_refs, max_clips=6):
    """Small fixed val probe recorded in the ledger each epoch."""
    val_ids = corpus.split_ids("val")[:max_clips]
    val_conditions = None
    if isinstance(conditions, TeacherForcedConditions):
        val_conditions = TeacherForcedConditions(
            corpus, val_ids, conditions.ttv, conditions.duration_source
        )
        val_conditions.refresh(0)
    pixels, lcs, lds = [], [], []
    for uid in val_ids:
        frames = corpus.frames(uid)
        if val_conditions is not None:
            seq = val_conditions.get(uid)
        else:
            seq = load_cached_features(corpus, uid)
        ref = silent_refs.get(uid)
        if ref is None:
            ref = silent_reference(corpus, corpus.meta(uid)["speaker_id"])
        out = generate_clip(gen, frames, seq.values, ref)
        pixels.append(float(np.abs(out - frames).mean()))
        lse_c, lse_d = lse(out, seq.values, sync_expert)
        lcs.append(lse_c)
        lds.append(lse_d)
    return {
        "pixel_l1": float(np.mean(pixels)),
        "lse_c": float(np.mean(lcs)),
        "lse_d": float(np.mean(lds)),
    }


def run_stage1(config: RunConfig, paths: ArtifactPaths) -> str:
    """Train the face generator on extracted features; returns checkpoint hash."""
    if config.stage1_condition_source != CONDITION_EXTRACTED:
        raise ConfigError("stage 1 must condition on extracted features")
    return _run_tfg_stage(config, paths, stage=1)


def run_stage2(config: RunConfig, paths: ArtifactPaths, variant: str = "full") -> str:
    """Fine-tune on teacher-forced predicted features (variant 'nosync' zeroes sync)."""
    if config.stage2_condition_source != CONDITION_TEACHER_FORCED:
        raise ConfigError("stage 2 must condition on teacher-forced predicted features")
    if variant not in ("full", "nosync"):
        raise ConfigError("stage-2 variant must be 'full' or 'nosync'")
    return _run_tfg_stage(config, paths, stage=2, variant=variant)


ABLATION_ROWS = (
    ("stage1_only_real", "stage1", "real_features"),
    ("stage1_only_predicted", "stage1", "predicted_features"),
    ("two_stage_no_sync", "stage2_nosync", "predicted_features"),
    ("full", "stage2", "predicted_features"),
)


def run_ablation_matrix(config: RunConfig, paths: ArtifactPaths) -> list:
    """Evaluate the four ablation rows under one protocol; returns report rows."""
    from .protocols import run_protocol

    rows = []
    for row_name, tag, condition in ABLATION_ROWS:
        _require(paths.tfg_checkpoint(config.seed, tag) / "index.json", f"{tag} checkpoint")
        report = run_protocol(
            "matched",
            condition,
            config,
            paths,
            generator_tag=tag,
            report_name=f"ablation_seed{config.seed}_{row_name}",
            include_speech=False,
        )
        rows.append(
            {
                "row": row_name,
                "generator": tag,
                "condition": condition,
                "config_hash": config.config_hash(),
                "metrics": report["aggregates"],
            }
        )
    out = paths.reports_dir / f"ablation_seed{config.seed}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, {"rows": rows})
    return rows
