"""Command-line surface: corpus/train/synthesize/evaluate/ablate/report/doctor.

Every command echoes its resolved config (flag > config file > default)
before running and is idempotent: re-running a completed command with the
same config is a no-op with exit 0. Exit codes: 0 ok, 2 config/input
error, 3 missing dependency, 4 alignment failure, 5 divergence abort.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .avi import write_avi
from .config import RunConfig, apply_overrides
from .corpus import Corpus, FPS, SAMPLE_RATE, make_corpus
from .errors import (
    AlignmentError,
    ConfigError,
    ContractViolation,
    DependencyError,
    DivergenceAbort,
    InputError,
    LatentFaceError,
)
from .experts import KINDS, load_expert, train_expert
from .features import FEATURE_VERSION, ensure_feature_cache
from .synth import (
    MIN_REFERENCE_SAMPLES,
    adapt_f0_to_reference,
    encode_style,
    load_synth,
    synthesize_speech,
    train_synth,
)
from .tfg import generate_clip, silent_reference
from .trainer import (
    ArtifactPaths,
    load_generator,
    open_corpus,
    run_ablation_matrix,
    run_stage1,
    run_stage2,
)
from .ttv import infer_free_running, load_ttv, train_ttv
from .utils import (
    canonical_json,
    configure_torch,
    read_f32,
    read_json,
    read_wav,
    sha256_file,
    write_f32,
    write_json,
    write_wav,
)

TOKEN_SYMBOLS = "abcdefghijklmnopqrst"  # a..t -> ids 1..20, space -> silence (0)


def parse_text(text: str) -> np.ndarray:
    """Token ids from either '0,5,9,0' or a symbol string like 'ab cd'."""
    text = text.strip()
    if not text:
        raise InputError("empty text")
    if re.fullmatch(r"[0-9,\s]+", text):
        try:
            ids = [int(part) for part in re.split(r"[,\s]+", text) if part]
        except ValueError as exc:
            raise InputError(f"bad token id list: {exc}")
    else:
        ids = []
        for char in text.lower():
            if char == " ":
                ids.append(0)
            elif char in TOKEN_SYMBOLS:
                ids.append(TOKEN_SYMBOLS.index(char) + 1)
            else:
                raise InputError(f"unknown symbol {char!r} (use a-t and spaces)")
    if any(i < 0 or i > 20 for i in ids):
        raise InputError("token ids must be in [0, 20]")
    if ids[0] != 0:
        ids = [0] + ids
    if ids[-1] != 0:
        ids = ids + [0]
    return np.asarray(ids, dtype=np.int64)


def load_reference_audio(spec: str, corpus: Corpus = None) -> np.ndarray:
    path = Path(spec)
    if path.exists():
        if path.suffix == ".wav":
            return read_wav(path)
        return read_f32(path)
    if corpus is not None and spec in corpus.manifest["utterances"]:
        return corpus.waveform(spec)
    raise InputError(f"reference audio {spec!r} is neither a file nor a corpus utterance id")


def _resolve_config(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        overrides = read_json(args.config)
        config = apply_overrides(config, overrides)
    if getattr(args, "seed", None) is not None:
        config = apply_overrides(config, {"seed": args.seed})
    config.validate()
    return config


def _paths(args) -> ArtifactPaths:
    home = Path(args.home) if args.home else Path(os.environ.get("LATENTFACE_HOME", "latentface_home"))
    corpus_override = Path(args.corpus) if getattr(args, "corpus", None) else None
    return ArtifactPaths(home, corpus_override)


def _echo_config(config: RunConfig) -> None:
    print(f"resolved config: {canonical_json(config.to_dict())}")


# ---------------------------------------------------------------------------
# commands

def cmd_corpus(args) -> int:
    config = _resolve_config(args)
    _echo_config(config)
    paths = _paths(args)
    manifest_path = paths.corpus_dir / "manifest.json"
    wanted = {
        "n_train_speakers": config.corpus.n_train_speakers,
        "n_heldout_speakers": config.corpus.n_heldout_speakers,
        "n_train": config.corpus.n_train,
        "n_val": config.corpus.n_val,
        "n_test": config.corpus.n_test,
    }
    if manifest_path.exists():
        manifest = read_json(manifest_path)
        if manifest.get("corpus_seed") != config.corpus.seed or manifest.get("config") != wanted:
            raise ConfigError(
                f"corpus at {paths.corpus_dir} was generated with a different config; "
                "use a fresh --corpus/--home directory"
            )
        corpus = Corpus(paths.corpus_dir)
        if manifest.get("feature_version") == FEATURE_VERSION:
            print("corpus already complete; nothing to do")
            return 0
    else:
        corpus = make_corpus(paths.corpus_dir, config.corpus)
        print(f"generated corpus at {paths.corpus_dir}")
    ensure_feature_cache(corpus)
    print(f"feature cache ready (version {FEATURE_VERSION})")
    return 0


def cmd_train_experts(args) -> int:
    config = _resolve_config(args)
    _echo_config(config)
    paths = _paths(args)
    corpus = open_corpus(paths)
    kinds = KINDS if args.kind == "all" else (args.kind,)
    for kind in kinds:
        out = paths.expert_dir(kind)
        if (out / "index.json").exists():
            try:
                _, meta = load_expert(out, kind)
                if meta.get("corpus_seed") == corpus.seed:
                    print(f"{kind}: already trained (val_score={meta.get('val_score')})")
                    continue
                raise ConfigError(f"{kind} expert was trained on a different corpus seed")
            except DependencyError:
                print(f"{kind}: existing checkpoint unusable; retraining")
        t0 = time.time()
        chash = train_expert(kind, corpus, config.experts, config.seed, out)
        _, meta = load_expert(out, kind)
        print(
            f"{kind}: trained in {time.time() - t0:.1f}s, "
            f"val_score={meta.get('val_score')}, checkpoint={chash[:12]}"
        )
    return 0


def _train_component(args, name, train_fn, load_fn, out_dir, component_config) -> int:
    config = _resolve_config(args)
    _echo_config(config)
    paths = _paths(args)
    corpus = open_corpus(paths)
    checkpoint_dir = out_dir(paths) / "checkpoint"
    if (checkpoint_dir / "index.json").exists():
        _, meta = load_fn(checkpoint_dir)
        if meta.get("component_config") == component_config(config):
            print(f"{name}: already trained; nothing to do")
            return 0
        raise ConfigError(f"{name} checkpoint at {checkpoint_dir} has a different config")
    t0 = time.time()
    chash = train_fn(corpus, config, paths)
    print(f"{name}: trained in {time.time() - t0:.1f}s, checkpoint={chash[:12]}")
    return 0


def cmd_train_ttv(args) -> int:
    from dataclasses import asdict

    def train(corpus, config, paths):
        h = train_ttv(corpus, config.ttv, config.seed, paths.ttv_dir)
        _annotate_component_config(paths.ttv_dir / "checkpoint", asdict(config.ttv))
        return h

    return _train_component(
        args, "ttv", train, load_ttv, lambda p: p.ttv_dir,
        lambda c: asdict(c.ttv),
    )


def cmd_train_synth(args) -> int:
    from dataclasses import asdict

    def train(corpus, config, paths):
        h = train_synth(corpus, config.synth, config.seed, paths.synth_dir)
        _annotate_component_config(paths.synth_dir / "checkpoint", _jsonable(asdict(config.synth)))
        return h

    return _train_component(
        args, "synth", train, load_synth, lambda p: p.synth_dir,
        lambda c: _jsonable(asdict(c.synth)),
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _annotate_component_config(checkpoint_dir, component_config) -> None:
    index_path = Path(checkpoint_dir) / "index.json"
    index = read_json(index_path)
    index["meta"]["component_config"] = component_config
    write_json(index_path, index)


def cmd_train_tfg(args) -> int:
    config = _resolve_config(args)
    _echo_config(config)
    paths = _paths(args)
    if args.stage == 1:
        chash = run_stage1(config, paths)
    else:
        chash = run_stage2(config, paths, variant=args.variant)
    print(f"tfg stage {args.stage} ({args.variant}): checkpoint={chash[:12]}")
    return 0


def run_synthesize(config: RunConfig, paths: ArtifactPaths, text, reference_spec, speaker_id, out_dir, generator_tag="stage2") -> dict:
    """Full text -> (audio, video) synthesis; returns the output manifest."""
    configure_torch()
    corpus = open_corpus(paths)
    tokens = parse_text(text) if isinstance(text, str) else np.asarray(text, dtype=np.int64)
    reference = load_reference_audio(reference_spec, corpus)
    if len(reference) < MIN_REFERENCE_SAMPLES:
        raise InputError(f"reference audio must be >= {MIN_REFERENCE_SAMPLES / SAMPLE_RATE:.1f}s")

    ttv_model, _ = load_ttv(paths.ttv_checkpoint)
    synth_model, _ = load_synth(paths.synth_checkpoint)
    generator = load_generator(paths.tfg_checkpoint(config.seed, generator_tag))

    out = infer_free_running(ttv_model, tokens, even_length=True)
    style = encode_style(synth_model, reference)
    f0 = adapt_f0_to_reference(out.f0, reference)
    wave = synthesize_speech(synth_model, out.features, f0, style)

    n_frames = len(out.features) // 2
    silent = silent_reference(corpus, speaker_id)
    upper_context = np.repeat(silent[None], n_frames, axis=0)
    frames = generate_clip(generator, upper_context, out.features.values, silent)

    if len(wave) * FPS != len(frames) * SAMPLE_RATE:
        raise AlignmentError("internal: audio/video duration mismatch")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_f32(out_dir / "audio.f32", wave)
    write_wav(out_dir / "audio.wav", wave, SAMPLE_RATE)
    write_f32(out_dir / "frames.f32", frames)
    write_avi(out_dir / "video.avi", frames, FPS)
    _write_contact_sheet(out_dir / "contact_sheet.png", frames)

    manifest = {
        "tokens": tokens.tolist(),
        "speaker_id": speaker_id,
        "n_frames": int(n_frames),
        "n_samples": int(len(wave)),
        "durations": out.durations.tolist(),
        "config_hash": config.config_hash(),
        "inputs": {
            "reference_sha256": _sha_of_reference(reference),
            "ttv": ckpt.checkpoint_hash(paths.ttv_checkpoint),
            "synth": ckpt.checkpoint_hash(paths.synth_checkpoint),
            "generator": ckpt.checkpoint_hash(paths.tfg_checkpoint(config.seed, generator_tag)),
        },
        "outputs": {
            name: sha256_file(out_dir / name)
            for name in ("audio.f32", "audio.wav", "frames.f32", "video.avi", "contact_sheet.png")
        },
    }
    write_json(out_dir / "manifest.json", manifest)
    return manifest


def _sha_of_reference(reference: np.ndarray) -> str:
    from .utils import sha256_bytes

    return sha256_bytes(np.ascontiguousarray(reference, dtype=np.float32).tobytes())


def _write_contact_sheet(path, frames, stride=5, max_tiles=12) -> None:
    from PIL import Image

    tiles = frames[::stride][:max_tiles]
    sheet = np.concatenate(list(tiles), axis=1)
    img = Image.fromarray(np.clip(sheet * 255.0 + 0.5, 0, 255).astype(np.uint8))
    img.save(path)


def cmd_synthesize(args) -> int:
    config = _resolve_config(args)
    _echo_config(config)
    paths = _paths(args)
    out_dir = Path(args.out)
    manifest = run_synthesize(
        config, paths, args.text, args.reference, args.speaker, out_dir, args.generator_tag
    )
    print(f"synthesized {manifest['n_frames']} frames / {manifest['n_samples']} samples -> {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    from .protocols import run_protocol

    config = _resolve_config(args)
    _echo_config(config)
    paths = _paths(args)
    report = run_protocol(
        args.protocol, args.condition, config, paths, generator_tag=args.generator_tag
    )
    print(f"report written: {paths.reports_dir / (report['name'] + '.json')}")
    for key, value in sorted(report["aggregates"].items()):
        print(f"  {key}: {value:.4f}")
    return 0


def cmd_ablate(args) -> int:
    config = _resolve_config(args)
    _echo_config(config)
    paths = _paths(args)
    rows = run_ablation_matrix(config, paths)
    for row in rows:
        metrics = row["metrics"]
        print(
            f"{row['row']:>24}: lse_c={metrics['lse_c']:.3f} lse_d={metrics['lse_d']:.3f} "
            f"ssim={metrics['ssim']:.3f} csim={metrics['csim']:.3f}"
        )
    return 0


def cmd_report(args) -> int:
    from .protocols import format_report_table

    config = _resolve_config(args)
    _echo_config(config)
    paths = _paths(args)
    reports = []
    for path in sorted(paths.reports_dir.glob("*.json")):
        data = read_json(path)
        if isinstance(data, dict) and "aggregates" in data:
            reports.append(data)
    if not reports:
        raise DependencyError(f"no reports found under {paths.reports_dir}")
    table = format_report_table(reports)
    (paths.reports_dir / "summary.md").write_text(table)
    print(table)
    return 0


def cmd_doctor(args) -> int:
    config = _resolve_config(args)
    _echo_config(config)
    paths = _paths(args)
    problems = pipeline_doctor(config, paths)
    return 0 if not problems else 3


def pipeline_doctor(config: RunConfig, paths: ArtifactPaths, log=print) -> list:
    """Verify the corpus -> experts -> ttv/synth -> stage1 -> stage2 chain."""
    problems = []

    def check(label, ok, detail=""):
        if ok:
            log(f"OK       {label}")
        else:
            log(f"MISSING  {label}" + (f" ({detail})" if detail else ""))
            problems.append(label)

    manifest = paths.corpus_dir / "manifest.json"
    check("corpus manifest", manifest.exists())
    if manifest.exists():
        data = read_json(manifest)
        check(
            "feature cache",
            data.get("feature_version") == FEATURE_VERSION,
            f"version {data.get('feature_version')}",
        )
    else:
        check("feature cache", False, "no corpus")

    for kind in KINDS:
        cdir = paths.expert_dir(kind)
        label = f"expert:{kind}"
        if not (cdir / "index.json").exists():
            check(label, False)
            continue
        issues = ckpt.verify_checkpoint(cdir)
        if issues:
            log(f"CORRUPT  {label}: {issues[0]}")
            problems.append(label)
            continue
        try:
            load_expert(cdir, kind)
            check(label, True)
        except DependencyError as exc:
            log(f"BAD      {label}: {exc}")
            problems.append(label)

    for label, cdir in (
        ("ttv", paths.ttv_checkpoint),
        ("synth", paths.synth_checkpoint),
        ("tfg:stage1", paths.tfg_checkpoint(config.seed, "stage1")),
        ("tfg:stage2", paths.tfg_checkpoint(config.seed, "stage2")),
    ):
        if not (cdir / "index.json").exists():
            check(label, False)
            continue
        issues = ckpt.verify_checkpoint(cdir)
        if issues:
            log(f"CORRUPT  {label}: {issues[0]}")
            problems.append(label)
        else:
            check(label, True)

    if problems:
        log(f"{len(problems)} problem(s); dependency order above")
    else:
        log("pipeline complete")
    return problems


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentface",
        description="Joint text-to-audio-visual synthesis on a procedural corpus",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--home", help="artifact root (default: $LATENTFACE_HOME or ./latentface_home)")
        p.add_argument("--config", help="JSON config override file")
        p.add_argument("--seed", type=int, help="run seed (overrides config file)")
        p.add_argument("--corpus", help="corpus directory (default: <home>/corpus)")

    p = sub.add_parser("corpus", help="generate the corpus and feature caches")
    common(p)
    p.set_defaults(fn=cmd_corpus)

    p = sub.add_parser("train-experts", help="train metric/loss expert networks")
    common(p)
    p.add_argument("--kind", default="all", choices=("all",) + KINDS)
    p.set_defaults(fn=cmd_train_experts)

    p = sub.add_parser("train-ttv", help="train the text-to-feature model")
    common(p)
    p.set_defaults(fn=cmd_train_ttv)

    p = sub.add_parser("train-synth", help="train the waveform synthesizer")
    common(p)
    p.set_defaults(fn=cmd_train_synth)

    p = sub.add_parser("train-tfg", help="train the face generator (stage 1 or 2)")
    common(p)
    p.add_argument("--stage", type=int, required=True, choices=(1, 2))
    p.add_argument("--variant", default="full", choices=("full", "nosync"))
    p.set_defaults(fn=cmd_train_tfg)

    p = sub.add_parser("synthesize", help="text -> audio + talking-face video")
    common(p)
    p.add_argument("--text", required=True, help="token ids '0,5,9,0' or symbols 'ab cd' (a-t)")
    p.add_argument("--reference", required=True, help="reference audio (.wav/.f32 path or corpus utterance id)")
    p.add_argument("--speaker", type=int, required=True, help="corpus speaker id for the face identity")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--generator-tag", default="stage2")
    p.set_defaults(fn=cmd_synthesize)

    p = sub.add_parser("evaluate", help="run one evaluation protocol cell")
    common(p)
    p.add_argument("--protocol", required=True, choices=("matched", "cross"))
    p.add_argument("--condition", required=True, choices=("real_features", "predicted_features"))
    p.add_argument("--generator-tag", default="stage2")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="evaluate the four-row ablation matrix")
    common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="summarize all reports as one table")
    common(p)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("doctor", help="verify the artifact dependency chain")
    common(p)
    p.set_defaults(fn=cmd_doctor)
    return parser


def main(argv=None) -> int:
    configure_torch()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, InputError, ContractViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except AlignmentError as exc:
        print(f"alignment error: {exc}", file=sys.stderr)
        return 4
    except DivergenceAbort as exc:
        print(
            f"divergence abort: {exc} (phase={exc.phase}, epoch={exc.epoch}, "
            f"batch={exc.batch}, component={exc.component})",
            file=sys.stderr,
        )
        return 5
    except LatentFaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
