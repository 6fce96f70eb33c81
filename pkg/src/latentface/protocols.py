"""Evaluation protocols and report emission.

`matched` regenerates each test clip with its own conditioning; `cross`
pairs every video with a different utterance's conditioning through a
seeded derangement (no fixed points). Conditioning is either features
extracted from real audio or teacher-forced predictions from the text
model; speech-side metrics (TER, SECS) use free-running synthesis and are
reported for the matched protocol.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig
from .corpus import Corpus
from .errors import ContractViolation
from .experts import load_expert, recognizer_val_ter, reference_token_sequence, levenshtein
from .features import estimate_f0, extract_features, load_cached_features, load_cached_f0
from .metrics import csim, fid, lmd, lse, psnr, secs, ssim
from .synth import adapt_f0_to_reference, encode_style, load_synth, synthesize_speech
from .tfg import generate_clip, silent_reference
from .trainer import ArtifactPaths, RunLedger, load_generator, open_corpus
from .ttv import infer_free_running, infer_teacher_forced, load_ttv
from .utils import rng_for, write_json

REPORT_COLUMNS = ("ssim", "psnr", "fid", "lse_c", "lse_d", "csim")
EXTRA_COLUMNS = ("lmd",)
PROTOCOLS = ("matched", "cross")
CONDITIONS = ("real_features", "predicted_features")


def seeded_derangement(n: int, seed) -> np.ndarray:
    """Random permutation of range(n) with no fixed points (rejection sampled)."""
    if n < 2:
        raise ContractViolation("derangement needs n >= 2")
    rng = rng_for("derangement", seed)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def fit_condition_length(values: np.ndarray, target_len: int) -> np.ndarray:
    """Crop or tile a mismatched condition to the video's feature length."""
    if len(values) >= target_len:
        return values[:target_len]
    reps = -(-target_len // len(values))
    return np.concatenate([values] * reps, axis=0)[:target_len]


def _predicted_condition(ttv_model, meta):
    durations = 2 * np.asarray(meta["durations_frames"], dtype=np.int64)
    return infer_teacher_forced(ttv_model, meta["tokens"], durations).features.values


def _speech_references(corpus, test_ids, seed):
    """Per-utterance same-speaker and cross-speaker reference ids (seeded)."""
    speakers = {uid: corpus.meta(uid)["speaker_id"] for uid in test_ids}
    refs = {}
    for uid in test_ids:
        rng = rng_for("speech-ref", seed, uid)
        same_pool = [r for r in test_ids if r != uid and speakers[r] == speakers[uid]]
        cross_pool = [r for r in test_ids if speakers[r] != speakers[uid]]
        same = same_pool[rng.integers(len(same_pool))] if same_pool else uid
        if not cross_pool:
            raise ContractViolation("need at least two test speakers for SECS")
        cross = cross_pool[rng.integers(len(cross_pool))]
        refs[uid] = (same, cross)
    return refs


def evaluate_speech(corpus, config: RunConfig, paths: ArtifactPaths, condition: str, test_ids=None) -> dict:
    """Speech-branch metrics: TER of synthesized speech plus same/cross SECS."""
    ttv_model, _ = load_ttv(paths.ttv_checkpoint)
    synth_model, _ = load_synth(paths.synth_checkpoint)
    recognizer, _ = load_expert(paths.expert_dir("recognizer"), "recognizer")
    speaker_expert, _ = load_expert(paths.expert_dir("speaker"), "speaker")

    test_ids = list(test_ids or corpus.split_ids("test"))
    refs = _speech_references(corpus, test_ids, config.eval.pairing_seed)

    total_dist = total_ref = 0
    same_scores, cross_scores = [], []
    for uid in test_ids:
        meta = corpus.meta(uid)
        same_id, cross_id = refs[uid]
        ref_wave = corpus.waveform(same_id)
        style = encode_style(synth_model, ref_wave, same_id)
        if condition == "predicted_features":
            out = infer_free_running(ttv_model, meta["tokens"])
            f0 = adapt_f0_to_reference(out.f0, ref_wave)
            feats = out.features
        else:
            feats = load_cached_features(corpus, uid)
            f0 = load_cached_f0(corpus, uid)
        wave = synthesize_speech(synth_model, feats, f0, style)

        decoded = recognizer.decode(extract_features(wave).values)
        ref_tokens = reference_token_sequence(meta["tokens"])
        total_dist += levenshtein(decoded, ref_tokens)
        total_ref += len(ref_tokens)
        same_scores.append(secs(wave, ref_wave, speaker_expert))
        cross_scores.append(secs(wave, corpus.waveform(cross_id), speaker_expert))

    return {
        "ter": total_dist / max(total_ref, 1),
        "secs_same": float(np.mean(same_scores)),
        "secs_cross": float(np.mean(cross_scores)),
        "secs_gap": float(np.mean(same_scores) - np.mean(cross_scores)),
    }


def run_protocol(
    protocol: str,
    condition: str,
    config: RunConfig,
    paths: ArtifactPaths,
    generator_tag: str = "stage2",
    report_name: str = None,
    include_speech: bool = True,
    generator_fn=None,
    max_clips: int = None,
) -> dict:
    """Evaluate one (protocol, condition) cell and write its report files."""
    if protocol not in PROTOCOLS:
        raise ContractViolation(f"protocol must be one of {PROTOCOLS}")
    if condition not in CONDITIONS:
        raise ContractViolation(f"condition must be one of {CONDITIONS}")
    corpus = open_corpus(paths)

    sync_expert, sync_meta = load_expert(paths.expert_dir("sync"), "sync")
    identity_expert, id_meta = load_expert(paths.expert_dir("identity"), "identity")
    landmark_expert, lm_meta = load_expert(paths.expert_dir("landmark"), "landmark")
    pyramid, perc_meta = load_expert(paths.expert_dir("perceptual"), "perceptual")
    ttv_model = None
    if condition == "predicted_features":
        ttv_model, _ = load_ttv(paths.ttv_checkpoint)

    generator = None
    if generator_fn is None:
        generator = load_generator(paths.tfg_checkpoint(config.seed, generator_tag))

    test_ids = corpus.split_ids("test")
    if max_clips is not None:
        test_ids = test_ids[:max_clips]
    if protocol == "cross":
        perm = seeded_derangement(len(test_ids), config.eval.pairing_seed)
        if np.any(perm == np.arange(len(test_ids))):
            raise RuntimeError("internal error: derangement produced a fixed point")
        paired = {test_ids[i]: test_ids[int(perm[i])] for i in range(len(test_ids))}
    else:
        paired = {uid: uid for uid in test_ids}

    per_clip = []
    gen_frames_all, gt_frames_all = [], []
    for uid in test_ids:
        meta = corpus.meta(uid)
        src_id = paired[uid]
        src_meta = corpus.meta(src_id)
        gt_frames = corpus.frames(uid)
        n = len(gt_frames)
        if condition == "real_features":
            cond_values = load_cached_features(corpus, src_id).values
        else:
            cond_values = _predicted_condition(ttv_model, src_meta)
        cond_values = fit_condition_length(cond_values, 2 * n)

        speaker = corpus.speaker(meta["speaker_id"])
        silent_ref = silent_reference(corpus, meta["speaker_id"])
        if generator_fn is not None:
            generated = generator_fn(gt_frames, cond_values, silent_ref)
        else:
            generated = generate_clip(generator, gt_frames, cond_values, silent_ref)

        lse_c, lse_d = lse(generated, cond_values, sync_expert, config.eval.max_offset)
        row = {
            "utterance_id": uid,
            "paired_with": src_id,
            "ssim": float(np.mean([ssim(g, t) for g, t in zip(generated, gt_frames)])),
            "psnr": float(np.mean([psnr(g, t) for g, t in zip(generated, gt_frames)])),
            "lmd": lmd(generated, gt_frames, landmark_expert, speaker.eye_spacing),
            "lse_c": lse_c,
            "lse_d": lse_d,
            "csim": csim(generated, silent_ref, identity_expert),
        }
        per_clip.append(row)
        gen_frames_all.append(generated)
        gt_frames_all.append(gt_frames)

    fid_value, fid_clip = fid(
        np.concatenate(gen_frames_all),
        np.concatenate(gt_frames_all),
        pyramid.embed,
        config.eval.fid_min_frames,
    )
    aggregates = {
        key: float(np.mean([row[key] for row in per_clip]))
        for key in ("ssim", "psnr", "lmd", "lse_c", "lse_d", "csim")
    }
    aggregates["fid"] = float(fid_value)

    report = {
        "name": report_name or f"{protocol}_{condition}_{generator_tag}",
        "protocol": protocol,
        "condition": condition,
        "generator_tag": generator_tag,
        "config_hash": config.config_hash(),
        "expert_hashes": {
            "sync": _hash_of(paths.expert_dir("sync")),
            "identity": _hash_of(paths.expert_dir("identity")),
            "landmark": _hash_of(paths.expert_dir("landmark")),
            "perceptual": _hash_of(paths.expert_dir("perceptual")),
        },
        "generator_hash": None if generator_fn is not None
        else ckpt.checkpoint_hash(paths.tfg_checkpoint(config.seed, generator_tag)),
        "pairing": paired,
        "per_clip": per_clip,
        "aggregates": aggregates,
        "fid_clipped_eigen_mass": float(fid_clip),
        "hygiene": _hygiene_check(paths, test_ids),
        "expert_floors": {
            "sync": sync_meta["val_score"],
            "identity": id_meta["val_score"],
            "landmark": lm_meta["val_score"],
            "perceptual_params": perc_meta.get("seed"),
        },
    }
    if include_speech and protocol == "matched":
        report["speech"] = evaluate_speech(corpus, config, paths, condition, test_ids)

    write_report_files(report, paths.reports_dir)
    return report


def _hash_of(path):
    try:
        return ckpt.checkpoint_hash(path)
    except Exception:
        return None


def _hygiene_check(paths: ArtifactPaths, test_ids) -> dict:
    """Prove no test utterance id appears in any training ledger."""
    trained_ids = set()
    ledgers = sorted(paths.home.glob("tfg/seed*/ledger.jsonl"))
    for ledger_path in ledgers:
        for record in RunLedger(ledger_path.parent).records():
            if record.get("event") == "data":
                trained_ids.update(record.get("utterance_ids", []))
    overlap = sorted(trained_ids & set(test_ids))
    return {
        "checked_ledgers": [str(p) for p in ledgers],
        "overlap": overlap,
        "disjoint": not overlap,
    }


# ---------------------------------------------------------------------------
# report emission

def write_report_files(report: dict, reports_dir) -> None:
    reports_dir = Path(reports_dir)
    reports_dir.mkdir(parents=True, exist_ok=True)
    name = report["name"]
    write_json(reports_dir / f"{name}.json", report)

    with open(reports_dir / f"{name}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        fields = ["utterance_id", "paired_with", "ssim", "psnr", "lmd", "lse_c", "lse_d", "csim"]
        writer.writerow(fields)
        for row in report["per_clip"]:
            writer.writerow([row[f] for f in fields])

    with open(reports_dir / f"{name}.md", "w") as fh:
        fh.write(format_report_table([report]))


def format_report_table(reports: list) -> str:
    """Markdown summary table in the pinned column order."""
    lines = [
        "| Report | " + " | ".join(c.upper().replace("_", "-") for c in REPORT_COLUMNS) + " |",
        "|" + "---|" * (len(REPORT_COLUMNS) + 1),
    ]
    for report in reports:
        agg = report["aggregates"]
        cells = " | ".join(f"{agg[c]:.4f}" for c in REPORT_COLUMNS)
        lines.append(f"| {report['name']} | {cells} |")
    lines.append("")
    lines.append("| Report | LMD | TER | SECS-same | SECS-cross |")
    lines.append("|" + "---|" * 5)
    for report in reports:
        agg = report["aggregates"]
        speech = report.get("speech") or {}
        lines.append(
            "| {name} | {lmd:.4f} | {ter} | {ss} | {sc} |".format(
                name=report["name"],
                lmd=agg["lmd"],
                ter=f"{speech['ter']:.4f}" if "ter" in speech else "-",
                ss=f"{speech['secs_same']:.4f}" if "secs_same" in speech else "-",
                sc=f"{speech['secs_cross']:.4f}" if "secs_cross" in speech else "-",
            )
        )
    return "\n".join(lines) + "\n"
