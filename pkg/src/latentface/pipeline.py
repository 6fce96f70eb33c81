"""End-to-end pipeline driver: corpus -> experts -> ttv/synth -> two-stage TFG -> reports.

Idempotent per step (each step checks its artifact before running), so the
build can be interrupted and resumed. Step durations and checkpoint hashes
are recorded in `<home>/pipeline_state.json`.
"""

from __future__ import annotations

import time
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt
from .config import RunConfig, apply_overrides
from .corpus import Corpus, make_corpus
from .errors import DependencyError
from .experts import KINDS, load_expert, train_expert
from .features import FEATURE_VERSION, ensure_feature_cache
from .synth import load_synth, train_synth
from .trainer import ArtifactPaths, run_ablation_matrix, run_stage1, run_stage2
from .ttv import load_ttv, train_ttv
from .utils import read_json, write_json

DEFAULT_TFG_SEEDS = (0, 1, 2)


def _state_path(paths: ArtifactPaths) -> Path:
    return paths.home / "pipeline_state.json"


def _load_state(paths: ArtifactPaths) -> dict:
    path = _state_path(paths)
    return read_json(path) if path.exists() else {"steps": {}}


def _mark(paths: ArtifactPaths, state: dict, step: str, seconds: float, **info) -> None:
    state["steps"][step] = {"seconds": round(seconds, 2), **info}
    state["total_seconds"] = round(sum(s["seconds"] for s in state["steps"].values()), 2)
    write_json(_state_path(paths), state)


def _timed(fn):
    t0 = time.time()
    result = fn()
    return result, time.time() - t0


def build_pipeline(config: RunConfig, paths: ArtifactPaths, tfg_seeds=DEFAULT_TFG_SEEDS, log=print) -> dict:
    """Run (or resume) the full default pipeline; returns the state dict."""
    config.validate()
    paths.home.mkdir(parents=True, exist_ok=True)
    state = _load_state(paths)
    state["config_hash"] = config.config_hash()

    if not (paths.corpus_dir / "manifest.json").exists():
        log("[pipeline] generating corpus")
        _, dt = _timed(lambda: make_corpus(paths.corpus_dir, config.corpus))
        _mark(paths, state, "corpus", dt)
    corpus = Corpus(paths.corpus_dir)
    if corpus.manifest.get("feature_version") != FEATURE_VERSION:
        log("[pipeline] caching features")
        _, dt = _timed(lambda: ensure_feature_cache(corpus))
        _mark(paths, state, "features", dt)

    for kind in KINDS:
        out = paths.expert_dir(kind)
        if (out / "index.json").exists():
            continue
        log(f"[pipeline] training expert: {kind}")
        chash, dt = _timed(lambda: train_expert(kind, corpus, config.experts, config.seed, out))
        _, meta = load_expert(out, kind)
        _mark(paths, state, f"expert:{kind}", dt, checkpoint=chash, val_score=meta.get("val_score"))

    if not (paths.ttv_checkpoint / "index.json").exists():
        log("[pipeline] training ttv")
        chash, dt = _timed(lambda: train_ttv(corpus, config.ttv, config.seed, paths.ttv_dir))
        _, meta = load_ttv(paths.ttv_checkpoint)
        _mark(
            paths, state, "ttv", dt, checkpoint=chash,
            val_teacher_l1=meta["val_teacher_l1"],
            val_mean_baseline_l1=meta["val_mean_baseline_l1"],
            val_duration_pearson=meta["val_duration_pearson"],
        )

    if not (paths.synth_checkpoint / "index.json").exists():
        log("[pipeline] training synth")
        chash, dt = _timed(lambda: train_synth(corpus, config.synth, config.seed, paths.synth_dir))
        _mark(paths, state, "synth", dt, checkpoint=chash)

    for seed in tfg_seeds:
        seed_config = apply_overrides(config, {"seed": int(seed)})
        for tag, runner in (
            ("stage1", lambda c: run_stage1(c, paths)),
            ("stage2", lambda c: run_stage2(c, paths, "full")),
            ("stage2_nosync", lambda c: run_stage2(c, paths, "nosync")),
        ):
            step = f"tfg:seed{seed}:{tag}"
            if (paths.tfg_checkpoint(int(seed), tag) / "index.json").exists():
                continue
            log(f"[pipeline] training {step}")
            chash, dt = _timed(lambda: runner(seed_config))
            _mark(paths, state, step, dt, checkpoint=chash)

    for seed in tfg_seeds:
        step = f"ablation:seed{seed}"
        report_path = paths.reports_dir / f"ablation_seed{seed}.json"
        if report_path.exists():
            continue
        seed_config = apply_overrides(config, {"seed": int(seed)})
        log(f"[pipeline] evaluating {step}")
        _, dt = _timed(lambda: run_ablation_matrix(seed_config, paths))
        _mark(paths, state, step, dt)

    from .protocols import run_protocol

    primary = apply_overrides(config, {"seed": int(tfg_seeds[0])})
    for protocol in ("matched", "cross"):
        for condition in ("real_features", "predicted_features"):
            name = f"{protocol}_{condition}_stage2_seed{tfg_seeds[0]}"
            if (paths.reports_dir / f"{name}.json").exists():
                continue
            log(f"[pipeline] evaluating {name}")
            _, dt = _timed(
                lambda: run_protocol(
                    protocol, condition, primary, paths,
                    generator_tag="stage2", report_name=name,
                    include_speech=(protocol == "matched"),
                )
            )
            _mark(paths, state, f"protocol:{name}", dt)

    state["done"] = True
    write_json(_state_path(paths), state)
    log(f"[pipeline] complete in {state['total_seconds']:.0f}s total")
    return state


def pipeline_is_complete(paths: ArtifactPaths) -> bool:
    path = _state_path(paths)
    return path.exists() and read_json(path).get("done", False)


def load_pipeline_state(paths: ArtifactPaths) -> dict:
    path = _state_path(paths)
    if not path.exists():
        raise DependencyError(f"no pipeline state at {path}")
    return read_json(path)


def verify_pipeline_hashes(paths: ArtifactPaths) -> list:
    """Cross-check recorded step hashes against on-disk checkpoints."""
    state = _load_state(paths)
    problems = []
    for step, info in state.get("steps", {}).items():
        expected = info.get("checkpoint")
        if not expected:
            continue
        if step.startswith("expert:"):
            cdir = paths.expert_dir(step.split(":", 1)[1])
        elif step == "ttv":
            cdir = paths.ttv_checkpoint
        elif step == "synth":
            cdir = paths.synth_checkpoint
        elif step.startswith("tfg:"):
            _, seed_part, tag = step.split(":")
            cdir = paths.tfg_checkpoint(int(seed_part[4:]), tag)
        else:
            continue
        try:
            actual = ckpt.checkpoint_hash(cdir)
        except Exception as exc:
            problems.append(f"{step}: {exc}")
            continue
        if actual != expected:
            problems.append(f"{step}: hash drift ({actual[:12]} != {expected[:12]})")
    return problems
