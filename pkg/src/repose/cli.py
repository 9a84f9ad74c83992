"""Command-line pipeline: dataset build, caption, train, edit, eval.

Every subcommand reads one YAML config (flags override), honors --seed, and
writes machine-readable artifacts that record the seed. Exit codes are
stable: 2 unreadable inputs / usage, 3 captioner unreachable, 4 non-finite
loss, 5 modality mismatch, 6 malformed ratings file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import captioning, dataset, diffusion, evaluation
from .conditioning import (
    ConditioningPipeline,
    ModalityMismatch,
    make_image_encoder,
    make_text_encoder,
    parse_variant,
)
from .config import RunConfig, load_config
from .denoiser import CondUNet, DenoiserConfig
from .pose import PoseSkeleton, load_pose_file

log = logging.getLogger("repose")

EXIT_UNREADABLE_INPUT = 2
EXIT_CAPTIONER_UNREACHABLE = 3
EXIT_NON_FINITE_LOSS = 4
EXIT_MODALITY_MISMATCH = 5
EXIT_BAD_RATINGS = 6


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except OSError as exc:
        raise CliError(EXIT_UNREADABLE_INPUT, f"cannot read image {path}: {exc}") from exc


def _save_image(path: str | Path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path)


def _load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return (np.asarray(img.convert("L")) > 127).astype(np.uint8)


def _save_mask(path: str | Path, mask: np.ndarray) -> None:
    _save_image(path, (mask * 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# dataset build

def _video_frame_records(
    frames: dataset.DirectoryFrameSource, poses_dir: Path, video_id: str
) -> list[dataset.FrameRecord]:
    pose_path = poses_dir / f"{video_id}.jsonl"
    if not pose_path.exists():
        raise CliError(EXIT_UNREADABLE_INPUT, f"missing pose file {pose_path}")
    poses_by_frame = load_pose_file(pose_path)
    records = []
    for frame_index in frames.frame_indices(video_id):
        records.append(
            dataset.FrameRecord(
                video_id=video_id,
                frame_index=frame_index,
                image=frames.get(video_id, frame_index),
                poses=tuple(poses_by_frame.get(frame_index, ())),
            )
        )
    return records


def _process_video(
    frames: dataset.DirectoryFrameSource,
    poses_dir: Path,
    video_id: str,
    config: RunConfig,
    assets_dir: Path,
) -> list[dataset.ManifestRecord]:
    curation = config.curation
    records = _video_frame_records(frames, poses_dir, video_id)
    filtered = [
        r for r in records
        if dataset.frame_filter(r, curation.visibility_threshold, curation.majority_count)
    ]
    keyframes = dataset.select_keyframes(filtered, curation)
    if not keyframes:
        return []
    manifest_records = []
    source = dataset.MappingFrameSource(
        {(r.video_id, r.frame_index): r.image for r in keyframes}
    )
    for pair in dataset.make_pairs(keyframes, curation):
        masked_target, mask, reference_crop = dataset.render_pair_assets(
            pair, source, curation.reference_resolution
        )
        masked_path = f"assets/{pair.pair_id}_masked.png"
        mask_path = f"assets/{pair.pair_id}_mask.png"
        crop_path = f"assets/{pair.pair_id}_ref.png"
        _save_image(assets_dir / f"{pair.pair_id}_masked.png", masked_target)
        _save_mask(assets_dir / f"{pair.pair_id}_mask.png", mask)
        _save_image(assets_dir / f"{pair.pair_id}_ref.png", reference_crop)
        manifest_records.append(
            dataset.ManifestRecord(
                pair=pair,
                masked_target_path=masked_path,
                mask_path=mask_path,
                reference_crop_path=crop_path,
            )
        )
    return manifest_records


def run_dataset_build(config: RunConfig, jobs: int = 1) -> dataset.ManifestStats:
    paths = config.paths
    frames_root = Path(paths.frames_dir)
    if not frames_root.is_dir():
        raise CliError(EXIT_UNREADABLE_INPUT, f"frames directory {frames_root} is not readable")
    poses_dir = Path(paths.poses_dir)
    frames = dataset.DirectoryFrameSource(frames_root)
    video_ids = frames.video_ids()

    out_dir = Path(paths.out_dir)
    assets_dir = paths.assets_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    assets_dir.mkdir(parents=True, exist_ok=True)

    try:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                per_video = list(
                    pool.map(
                        lambda vid: _process_video(frames, poses_dir, vid, config, assets_dir),
                        video_ids,
                    )
                )
        else:
            per_video = [
                _process_video(frames, poses_dir, vid, config, assets_dir)
                for vid in video_ids
            ]
    except Exception:
        # Remove partial outputs before surfacing the error.
        for stale in assets_dir.glob("*.png"):
            stale.unlink()
        if paths.manifest_path.exists():
            paths.manifest_path.unlink()
        raise

    # Single-writer merge in (video_id, target, reference) order: determinism.
    manifest_records = [record for video in per_video for record in video]
    manifest_records.sort(
        key=lambda r: (r.pair.video_id, r.pair.target_frame_index, r.pair.reference_frame_index)
    )
    dataset.write_manifest(paths.manifest_path, manifest_records)

    stats = dataset.manifest_stats(manifest_records)
    with open(paths.stats_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "seed": config.seed,
                "videos": stats.videos,
                "frames": stats.frames,
                "pairs": stats.pairs,
                "captions": stats.captions,
                "mean_caption_length": stats.mean_caption_length,
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    return stats


# ---------------------------------------------------------------------------
# caption

def _make_caption_client(stub: bool):
    if stub:
        return captioning.StubCaptionerClient()
    endpoint = os.environ.get(captioning.ENDPOINT_ENV_VAR)
    if not endpoint:
        raise CliError(
            EXIT_CAPTIONER_UNREACHABLE,
            f"no captioner endpoint: set {captioning.ENDPOINT_ENV_VAR} or pass --stub",
        )
    return captioning.HttpCaptionerClient(
        endpoint, api_key=os.environ.get(captioning.API_KEY_ENV_VAR)
    )


def run_caption(config: RunConfig, stub: bool, no_overwrite: bool) -> tuple[int, int]:
    paths = config.paths
    if not paths.manifest_path.exists():
        raise CliError(EXIT_UNREADABLE_INPUT, f"manifest {paths.manifest_path} not found")
    manifest = dataset.read_manifest(paths.manifest_path)
    frames = dataset.DirectoryFrameSource(paths.frames_dir)
    client = _make_caption_client(stub)
    retry = captioning.RetryPolicy(
        attempts=config.caption.retries, backoff_base=config.caption.backoff_base
    )
    template = config.caption.prompt_template or captioning.DEFAULT_PROMPT_TEMPLATE
    fewshot = captioning.neutral_fewshot_examples(config.caption.fewshot_count)

    todo = [
        record for record in manifest
        if not (no_overwrite and record.pair.caption)
    ]

    def caption_one(record: dataset.ManifestRecord):
        pair = record.pair
        reference = frames.get(pair.video_id, pair.reference_frame_index)
        target = frames.get(pair.video_id, pair.target_frame_index)
        composite = captioning.compose_side_by_side(reference, target)
        request = captioning.CaptionRequest(
            composite_image=composite, fewshot_examples=fewshot, prompt_template=template
        )
        return captioning.request_caption(request, client, pair.pair_id, retry)

    records: list[captioning.CaptionRecord] = []
    failures = 0
    with ThreadPoolExecutor(max_workers=max(1, config.caption.max_in_flight)) as pool:
        for pair_record, outcome in zip(
            todo, pool.map(lambda r: _try_caption(caption_one, r), todo)
        ):
            if isinstance(outcome, Exception):
                failures += 1
                log.warning("caption failed for %s: %s", pair_record.pair.pair_id, outcome)
            else:
                records.append(outcome)

    records.sort(key=lambda r: r.pair_id)
    manifest = captioning.attach_captions(manifest, records)
    dataset.write_manifest(paths.manifest_path, manifest)
    captioning.write_caption_records(paths.captions_path, records)
    return len(records), failures


def _try_caption(fn, record):
    try:
        return fn(record)
    except (captioning.CaptionerUnavailable, captioning.ValidationError, IOError) as exc:
        return exc


# ---------------------------------------------------------------------------
# train

def build_model(config: RunConfig) -> tuple[CondUNet, ConditioningPipeline]:
    """Seeded model construction so identical configs give identical weights."""
    torch.manual_seed(config.seed)
    denoiser = CondUNet(
        DenoiserConfig(
            base_width=config.diffusion.base_width,
            channel_mults=tuple(config.diffusion.channel_mults),
            attn_dim=config.diffusion.attn_dim,
        )
    )
    cond = config.conditioning
    pipeline = ConditioningPipeline(
        variant=parse_variant(config.variant),
        image_encoder=make_image_encoder(cond.image_encoder, cond.encoder_seed),
        text_encoder=make_text_encoder(cond.text_encoder, cond.encoder_seed),
        reference_resolution=config.curation.reference_resolution,
        dual_pose=cond.dual_pose,
        seed=cond.projection_seed,
    )
    return denoiser, pipeline


def _run_config_dict(config: RunConfig) -> dict:
    from .conditioning import NEUTRAL_SKELETON

    cond = config.conditioning
    return {
        "seed": config.seed,
        "variant": config.variant,
        "image_encoder": cond.image_encoder,
        "text_encoder": cond.text_encoder,
        "encoder_seed": cond.encoder_seed,
        "reference_resolution": config.curation.reference_resolution,
        "guidance_weight": config.diffusion.guidance_weight,
        "sample_steps": config.diffusion.sample_steps,
        "neutral_pose": NEUTRAL_SKELETON.to_rows(),
    }


def load_train_samples(
    config: RunConfig,
    manifest: list[dataset.ManifestRecord],
    pipeline: ConditioningPipeline,
) -> list[diffusion.TrainSample]:
    frames = dataset.DirectoryFrameSource(config.paths.frames_dir)
    out_dir = Path(config.paths.out_dir)
    samples = []
    for record in manifest:
        pair = record.pair
        samples.append(
            diffusion.make_train_sample(
                pipeline,
                target_image=frames.get(pair.video_id, pair.target_frame_index),
                mask=_load_mask(out_dir / record.mask_path),
                masked_target=_load_image(out_dir / record.masked_target_path),
                reference_crop=_load_image(out_dir / record.reference_crop_path),
                caption=pair.caption,
                target_pose=pair.target_pose,
                reference_pose=pair.reference_pose,
            )
        )
    return samples


def run_train(config: RunConfig, epochs: int | None = None) -> Path:
    paths = config.paths
    if not paths.manifest_path.exists():
        raise CliError(EXIT_UNREADABLE_INPUT, f"manifest {paths.manifest_path} not found")
    manifest = dataset.read_manifest(paths.manifest_path)
    if not manifest:
        raise CliError(EXIT_UNREADABLE_INPUT, "manifest is empty; nothing to train on")

    denoiser, pipeline = build_model(config)
    samples = load_train_samples(config, manifest, pipeline)
    schedule = diffusion.make_schedule(
        config.diffusion.timesteps, config.diffusion.beta_start, config.diffusion.beta_end
    )
    train_config = diffusion.TrainConfig(
        epochs=config.diffusion.epochs if epochs is None else epochs,
        batch_size=config.diffusion.batch_size,
        learning_rate=config.diffusion.learning_rate,
        lr_schedule=config.diffusion.lr_schedule,
        cond_dropout=config.diffusion.cond_dropout,
        checkpoint_every=config.diffusion.checkpoint_every,
        seed=config.seed,
    )
    try:
        checkpoint, epoch_losses = diffusion.train(
            denoiser,
            pipeline,
            samples,
            schedule,
            train_config,
            run_config=_run_config_dict(config),
            loss_log_path=paths.loss_log_path,
            checkpoint_dir=paths.checkpoint_dir,
        )
    except diffusion.NonFiniteLoss as exc:
        raise CliError(EXIT_NON_FINITE_LOSS, f"training aborted: {exc}") from exc
    final_path = paths.checkpoint_dir / f"checkpoint_{checkpoint.epoch:05d}.pt"
    if epoch_losses:
        print(f"final epoch mean loss: {epoch_losses[-1]:.6f}")
    print(f"checkpoint: {final_path}")
    return final_path


# ---------------------------------------------------------------------------
# edit

def _parse_bbox(text: str) -> tuple[int, int, int, int]:
    try:
        x0, y0, x1, y1 = (int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("bbox must be x0,y0,x1,y1 integers") from None
    if x1 <= x0 or y1 <= y0:
        raise argparse.ArgumentTypeError("bbox must have positive area")
    return x0, y0, x1, y1


def _load_single_pose(path: str | Path) -> PoseSkeleton:
    frames = load_pose_file(path)
    if not frames:
        raise CliError(EXIT_UNREADABLE_INPUT, f"pose file {path} has no records")
    first = min(frames)
    return frames[first][0]


def run_edit(config: RunConfig, args) -> Path:
    checkpoint_path = Path(args.checkpoint)
    if not checkpoint_path.exists():
        raise CliError(EXIT_UNREADABLE_INPUT, f"checkpoint {checkpoint_path} not found")
    checkpoint = diffusion.load_checkpoint(checkpoint_path)
    denoiser, pipeline, schedule = diffusion.restore_model(checkpoint)
    variant = pipeline.variant

    if args.caption and not variant.has_text:
        raise CliError(EXIT_MODALITY_MISMATCH, f"variant {variant.value} has no text slot")
    if args.pose and not variant.has_pose:
        raise CliError(EXIT_MODALITY_MISMATCH, f"variant {variant.value} has no pose slot")

    scene = _load_image(args.scene)
    height, width = scene.shape[:2]
    x0, y0, x1, y1 = args.bbox
    if x1 > width or y1 > height:
        raise CliError(EXIT_UNREADABLE_INPUT, "bbox exceeds scene bounds")
    mask = np.zeros((height, width), dtype=np.uint8)
    mask[y0:y1, x0:x1] = 1
    masked_scene = scene.copy()
    masked_scene[y0:y1, x0:x1] = dataset.MASK_FILL_VALUE

    reference = _load_image(args.reference)
    size = pipeline.reference_resolution
    reference_crop = np.asarray(
        Image.fromarray(reference).resize((size, size), Image.BILINEAR)
    )
    target_pose = _load_single_pose(args.pose) if args.pose else None

    try:
        bundle = pipeline.bundle_for(
            reference_crop, caption=args.caption, target_pose=target_pose
        )
    except ModalityMismatch as exc:
        raise CliError(EXIT_MODALITY_MISMATCH, str(exc)) from exc

    guidance = checkpoint.run_config.get("guidance_weight", config.diffusion.guidance_weight)
    steps = checkpoint.run_config.get("sample_steps") or config.diffusion.sample_steps
    rng = torch.Generator().manual_seed(config.seed)
    output = diffusion.sample_edit(
        denoiser, masked_scene, mask, bundle, schedule,
        w=guidance, rng=rng, steps=steps,
    )
    out_path = Path(args.out)
    _save_image(out_path, output)
    if args.overlay:
        if target_pose is None:
            log.warning("--overlay ignored: no target pose supplied")
        else:
            overlay_path = out_path.with_name(out_path.stem + "_overlay" + out_path.suffix)
            _save_image(overlay_path, evaluation.pose_overlay(output, target_pose))
    print(f"edit written to {out_path}")
    return out_path


# ---------------------------------------------------------------------------
# eval

def _load_image_dir(path: str | Path) -> list[np.ndarray]:
    directory = Path(path)
    if not directory.is_dir():
        raise CliError(EXIT_UNREADABLE_INPUT, f"{directory} is not a directory")
    files = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if len(files) < 2:
        raise CliError(EXIT_UNREADABLE_INPUT, f"need at least two images in {directory}")
    return [_load_image(p) for p in files]


def _aligned_pose_lists(
    predicted_path: str | Path, truth_path: str | Path
) -> tuple[list[PoseSkeleton], list[PoseSkeleton]]:
    predicted = load_pose_file(predicted_path)
    truth = load_pose_file(truth_path)
    shared = sorted(set(predicted) & set(truth))
    return (
        [predicted[i][0] for i in shared],
        [truth[i][0] for i in shared],
    )


def run_eval(config: RunConfig, args) -> dict:
    generated = _load_image_dir(args.generated)
    reference = _load_image_dir(args.reference)
    extractor = evaluation.RandomProjectionFeatures(dim=min(64, len(generated) - 1) or 1)
    report: dict = {"seed": config.seed, "config": config.variant}
    report["fid"] = evaluation.fid(
        extractor.extract(generated), extractor.extract(reference)
    )

    if args.generated_poses and args.reference_poses:
        missing = [
            p for p in (args.generated_poses, args.reference_poses) if not Path(p).exists()
        ]
        if missing:
            log.warning("pose files missing (%s); PCKh omitted", ", ".join(map(str, missing)))
        else:
            pred, truth = _aligned_pose_lists(args.generated_poses, args.reference_poses)
            if pred:
                result = evaluation.pckh_over_set(pred, truth, alpha=args.alpha)
                report["pckh"] = {
                    "mean": result.mean, "scored": result.scored, "skipped": result.skipped,
                }
            else:
                log.warning("no aligned pose records; PCKh omitted")
    elif args.generated_poses or args.reference_poses:
        log.warning("need both pose files for PCKh; omitted")

    if args.ratings:
        try:
            records = evaluation.read_ratings_csv(args.ratings)
        except (ValueError, KeyError) as exc:
            raise CliError(EXIT_BAD_RATINGS, f"malformed ratings CSV: {exc}") from exc
        report["ratings"] = evaluation.ratings_report(records)

    out_path = Path(args.out) if args.out else config.paths.report_path
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    print(json.dumps(report, indent=2))
    return report


# ---------------------------------------------------------------------------
# argument plumbing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repose")
    parser.add_argument("--config", help="YAML run config", default=None)
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p_dataset = sub.add_parser("dataset", help="dataset operations")
    dataset_sub = p_dataset.add_subparsers(dest="dataset_command", required=True)
    p_build = dataset_sub.add_parser("build", help="curate frames into a pair manifest")
    p_build.add_argument("--jobs", type=int, default=1, help="parallel videos")

    p_caption = sub.add_parser("caption", help="attach scene-difference captions")
    p_caption.add_argument("--stub", action="store_true", help="use the offline stub captioner")
    p_caption.add_argument(
        "--no-overwrite", action="store_true", help="keep captions that already exist"
    )

    p_train = sub.add_parser("train", help="train the inpainting denoiser")
    p_train.add_argument("--variant", choices=["c1", "c2", "c3", "c4"], default=None)
    p_train.add_argument("--epochs", type=int, default=None)

    p_edit = sub.add_parser("edit", help="generate an edit from a checkpoint")
    p_edit.add_argument("--checkpoint", required=True)
    p_edit.add_argument("--scene", required=True, help="target scene image")
    p_edit.add_argument("--bbox", required=True, type=_parse_bbox, help="x0,y0,x1,y1")
    p_edit.add_argument("--reference", required=True, help="reference person image")
    p_edit.add_argument("--caption", default=None)
    p_edit.add_argument("--pose", default=None, help="target pose JSONL")
    p_edit.add_argument("--out", default="edit.png")
    p_edit.add_argument("--overlay", action="store_true", help="also write a pose overlay")

    p_eval = sub.add_parser("eval", help="compute FID/PCKh/ratings report")
    p_eval.add_argument("--generated", required=True, help="directory of generated images")
    p_eval.add_argument("--reference", required=True, help="directory of reference images")
    p_eval.add_argument("--generated-poses", default=None)
    p_eval.add_argument("--reference-poses", default=None)
    p_eval.add_argument("--ratings", default=None, help="ratings CSV")
    p_eval.add_argument("--alpha", type=float, default=0.5, help="PCKh radius factor")
    p_eval.add_argument("--out", default=None, help="report JSON path")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed

        if args.command == "dataset" and args.dataset_command == "build":
            try:
                stats = run_dataset_build(config, jobs=args.jobs)
            except CliError:
                raise
            except (OSError, ValueError) as exc:
                raise CliError(EXIT_UNREADABLE_INPUT, f"dataset build failed: {exc}") from exc
            print(stats.format_table())
        elif args.command == "caption":
            attached, failures = run_caption(config, stub=args.stub, no_overwrite=args.no_overwrite)
            print(f"captions attached: {attached}, failures: {failures}")
        elif args.command == "train":
            if args.variant:
                config.variant = args.variant
            run_train(config, epochs=args.epochs)
        elif args.command == "edit":
            run_edit(config, args)
        elif args.command == "eval":
            run_eval(config, args)
        return 0
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
