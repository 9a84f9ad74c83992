#!/usr/bin/env python3
"""Sign-of-life experiment: memorize 8 synthetic 32x32 pairs, then
reconstruct a training target through the sampler.

Usage: python scripts/overfit_demo.py [outdir] [--epochs N]

Writes the loss log, the checkpoint, and side-by-side PNGs of
masked input / sample / ground truth for each training pair.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from repose.conditioning import ConditioningPipeline, Variant, make_image_encoder, make_text_encoder
from repose.dataset import CurationConfig, FrameRecord, MappingFrameSource, make_pairs, render_pair_assets
from repose.denoiser import CondUNet, DenoiserConfig
from repose.diffusion import TrainConfig, make_schedule, make_train_sample, sample_edit, save_checkpoint, train
from repose.evaluation import psnr
from repose.synthetic import render_frame

CAPTION = "the person moves sideways."


def build_fixture(pipeline):
    centers = [(9, 16), (15, 16), (21, 16), (27, 16)]
    frames = []
    for i, center in enumerate(centers):
        image, skeleton = render_frame(32, center, 0.15, (200, 60, 40))
        frames.append(FrameRecord(video_id="overfit", frame_index=i, image=image, poses=(skeleton,)))
    pairs = make_pairs(frames, CurationConfig(reference_resolution=64))[:8]
    source = MappingFrameSource({(f.video_id, f.frame_index): f.image for f in frames})
    samples = []
    for pair in pairs:
        masked_target, mask, crop = render_pair_assets(pair, source, 64)
        samples.append(
            make_train_sample(
                pipeline,
                target_image=source.get(pair.video_id, pair.target_frame_index),
                mask=mask,
                masked_target=masked_target,
                reference_crop=crop,
                caption=CAPTION,
                target_pose=pair.target_pose,
                reference_pose=pair.reference_pose,
            )
        )
    return pairs, source, samples


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("outdir", nargs="?", default="overfit_out")
    parser.add_argument("--epochs", type=int, default=200)
    args = parser.parse_args()
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    started = time.time()
    torch.manual_seed(0)
    denoiser = CondUNet(DenoiserConfig(base_width=48, channel_mults=(1, 2)))
    pipeline = ConditioningPipeline(
        Variant.C4_IMG_POSE_TEXT,
        make_image_encoder("hashed"), make_text_encoder("hashed"),
        reference_resolution=64,
    )
    pairs, source, samples = build_fixture(pipeline)
    schedule = make_schedule(100, 1e-4, 0.18)
    config = TrainConfig(epochs=args.epochs, batch_size=1, learning_rate=2e-3,
                         lr_schedule="cosine", cond_dropout=0.1, checkpoint_every=0, seed=0)
    checkpoint, losses = train(
        denoiser, pipeline, samples, schedule, config,
        loss_log_path=outdir / "loss_log.csv",
    )
    save_checkpoint(outdir / "checkpoint.pt", checkpoint)
    print(f"trained {args.epochs} epochs in {time.time() - started:.0f}s; "
          f"best epoch loss {min(losses):.4f}")

    denoiser.eval()
    for index, pair in enumerate(pairs):
        masked, mask, crop = render_pair_assets(pair, source, 64)
        target = source.get(pair.video_id, pair.target_frame_index)
        bundle = pipeline.bundle_for(crop, CAPTION, pair.target_pose, pair.reference_pose)
        with torch.no_grad():
            output = sample_edit(
                denoiser, masked, mask, bundle, schedule,
                w=1.0, rng=torch.Generator().manual_seed(3 + index),
            )
        strip = np.concatenate([masked, output, target], axis=1)
        Image.fromarray(strip).save(outdir / f"pair_{index}.png")
        print(f"pair {index}: PSNR inside mask {psnr(output, target, mask):.2f} dB")
    print(f"outputs in {outdir}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
