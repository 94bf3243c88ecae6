"""Command-line driver: synth, train-vqvae, train-diffusion, generate,
evaluate, inspect.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numerical failure. `LISTENMOTION_THREADS` overrides the torch thread count.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_config
from .container import read_tensor_container
from .data import DyadSample, generate_corpus, generate_dyad, read_dataset, sliding_window, write_dataset
from .errors import (DegenerateState, FormatError, InvalidConfig, InvalidInput,
                     ModelError, TrainingError)
from .motion import MotionSequence
from .pipeline import (DiffusionCheckpoint, evaluate_datasets, generate_listener,
                       inspect_diffusion, inspect_vqvae, train_diffusion)
from .quantizer import CHECKPOINT_MAGIC, VqvaeCheckpoint, train_vqvae


def _write_history_csv(history: list[dict], path: Path) -> None:
    if not history:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)


def _maybe_plot(history: list[dict], path: Path) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    epochs = [h["epoch"] for h in history]
    for key in history[0]:
        if key != "epoch" and "total" in key:
            ax.plot(epochs, [h[key] for h in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _dataset_path(args, cfg: RunConfig) -> Path:
    return Path(args.data) if args.data else Path(cfg.out_dir) / "dataset.dlds"


def cmd_synth(args, cfg: RunConfig) -> int:
    cfg = cfg.normalized()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.stream_frames:
        samples: list[DyadSample] = []
        stream_cfg = replace(cfg.data, num_frames=cfg.stream_frames)
        for i in range(cfg.corpus_count):
            stream = generate_dyad(stream_cfg, np.random.default_rng(cfg.data.seed + i))
            samples.extend(sliding_window(stream, cfg.data.num_frames, cfg.window_stride))
    else:
        samples = generate_corpus(cfg.data, cfg.corpus_count)
    path = out_dir / "dataset.dlds"
    echo = {"config_hash": cfg.config_hash(), "data": cfg.data.to_dict(),
            "corpus_count": cfg.corpus_count, "stream_frames": cfg.stream_frames,
            "window_stride": cfg.window_stride}
    write_dataset(samples, path, config_echo=echo)
    topics = sorted({s.topic_id for s in samples})
    print(f"wrote {len(samples)} samples to {path}")
    print(f"  frames={cfg.data.num_frames} feat_dim={cfg.data.feat_dim} "
          f"fps={cfg.data.fps} topics={topics}")
    return 0


def cmd_train_vqvae(args, cfg: RunConfig) -> int:
    cfg = cfg.normalized()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples, _ = read_dataset(_dataset_path(args, cfg))
    if not samples:
        raise InvalidInput("dataset is empty")
    resume = VqvaeCheckpoint.load(args.resume) if args.resume else None
    ckpt, history = train_vqvae([s.listener for s in samples], cfg.vqvae, seed=cfg.seed,
                                resume=resume, config_hash=cfg.config_hash())
    ckpt_path = out_dir / "vqvae.lmck"
    ckpt.save(ckpt_path)
    _write_history_csv(history, out_dir / "vqvae_loss.csv")
    _maybe_plot(history, out_dir / "vqvae_loss.png")
    last = history[-1]
    print(f"wrote {ckpt_path} after {ckpt.epochs_trained} epochs "
          f"(train_total={last['train_total']:.5f} val_total={last['val_total']:.5f})")
    return 0


def cmd_train_diffusion(args, cfg: RunConfig) -> int:
    cfg = cfg.normalized()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples, _ = read_dataset(_dataset_path(args, cfg))
    if not samples:
        raise InvalidInput("dataset is empty")
    vq_path = Path(args.vqvae) if args.vqvae else out_dir / "vqvae.lmck"
    vq_ckpt = VqvaeCheckpoint.load(vq_path)
    resume = DiffusionCheckpoint.load(args.resume) if args.resume else None
    ckpt, history = train_diffusion(samples, vq_ckpt, cfg, seed=cfg.seed, resume=resume)
    ckpt_path = out_dir / "diffusion.lmck"
    ckpt.save(ckpt_path)
    _write_history_csv(history, out_dir / "diffusion_loss.csv")
    _maybe_plot(history, out_dir / "diffusion_loss.png")
    last = history[-1]
    print(f"wrote {ckpt_path} after {ckpt.epochs_trained} epochs "
          f"(train_total={last['train_total']:.5f} val_total={last['val_total']:.5f})")
    return 0


def cmd_generate(args, cfg: RunConfig) -> int:
    cfg = cfg.normalized()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples, _ = read_dataset(_dataset_path(args, cfg))
    if not samples:
        raise InvalidInput("dataset is empty")
    vq_path = Path(args.vqvae) if args.vqvae else out_dir / "vqvae.lmck"
    diff_path = Path(args.diffusion) if args.diffusion else out_dir / "diffusion.lmck"
    vq_ckpt = VqvaeCheckpoint.load(vq_path)
    diff_ckpt = DiffusionCheckpoint.load(diff_path)
    reps = args.samples or cfg.samples_per_input

    generated: list[DyadSample] = []
    seeds: list[int] = []
    for i, sample in enumerate(samples):
        for rep in range(reps):
            seed = cfg.seed + 1000 * i + rep
            listener = generate_listener(sample, vq_ckpt, diff_ckpt,
                                         np.random.default_rng(seed))
            generated.append(DyadSample(
                speaker=sample.speaker, listener=listener, waveform=sample.waveform,
                sample_rate=sample.sample_rate, text_tokens=sample.text_tokens,
                topic_id=sample.topic_id))
            seeds.append(seed)
    path = out_dir / "generated.dlds"
    echo = {"config_hash": cfg.config_hash(), "sample_seeds": seeds,
            "samples_per_input": reps,
            "switches": {"use_condition": diff_ckpt.use_condition,
                         "use_text": diff_ckpt.fusion_config.use_text,
                         "use_differential": diff_ckpt.fusion_config.use_differential}}
    write_dataset(generated, path, config_echo=echo)
    print(f"wrote {len(generated)} generated samples to {path}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    cfg = cfg.normalized()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gen_path = Path(args.generated) if args.generated else out_dir / "generated.dlds"
    ref_path = Path(args.reference) if args.reference else out_dir / "dataset.dlds"
    generated, gen_manifest = read_dataset(gen_path)
    reference, _ = read_dataset(ref_path)
    reps = 1
    gen_echo = gen_manifest.get("config") or {}
    if gen_echo.get("samples_per_input"):
        reps = int(gen_echo["samples_per_input"])
    if reps > 1:
        if len(generated) != reps * len(reference):
            raise InvalidInput(f"generated count {len(generated)} is not "
                               f"{reps} x reference count {len(reference)}")
        reference = [r for r in reference for _ in range(reps)]
    echo = {"config_hash": cfg.config_hash(), "generated": str(gen_path),
            "reference": str(ref_path)}
    if gen_echo.get("switches"):
        echo["switches"] = gen_echo["switches"]
    report = evaluate_datasets(generated, reference, config_echo=echo)
    (out_dir / "report.json").write_text(report.to_json())
    table = report.to_table()
    (out_dir / "report.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_inspect(args, cfg: RunConfig) -> int:
    path = Path(args.checkpoint)
    meta, _ = read_tensor_container(path, CHECKPOINT_MAGIC)
    kind = meta.get("kind")
    if kind == "vqvae":
        info = inspect_vqvae(VqvaeCheckpoint.load(path))
        counts = np.asarray(info.pop("usage_counts"))
        print(json.dumps(info, indent=2, sort_keys=True))
        used = np.flatnonzero(counts > 0)
        print(f"usage histogram: {len(used)}/{counts.size} codes used")
        for idx in used[:16]:
            print(f"  code {idx:4d}: {counts[idx]:.1f}")
        if len(used) > 16:
            print(f"  ... {len(used) - 16} more")
    elif kind == "diffusion":
        info = inspect_diffusion(DiffusionCheckpoint.load(path))
        curve = np.asarray(info.pop("mask_cum"))
        print(json.dumps(info, indent=2, sort_keys=True))
        marks = np.linspace(0, curve.size - 1, min(6, curve.size)).astype(int)
        summary = ", ".join(f"t={m + 1}:{curve[m]:.4f}" for m in marks)
        print(f"cumulative mask mass: {summary}")
    else:
        raise InvalidInput(f"{path}: unknown checkpoint kind {kind!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="listenmotion",
        description="Listener head-motion generation via VQ tokens and discrete diffusion")
    parser.add_argument("--config", help="path to a run-config JSON file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the config output directory")
    parser.add_argument("--emit-default-config", action="store_true",
                        help="print the full default config JSON and exit")
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("synth", help="generate a synthetic dyadic dataset")

    p = sub.add_parser("train-vqvae", help="train the motion VQ-VAE")
    p.add_argument("--data", help="dataset path (default OUT/dataset.dlds)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("train-diffusion", help="train the conditional denoiser")
    p.add_argument("--data", help="dataset path (default OUT/dataset.dlds)")
    p.add_argument("--vqvae", help="VQ-VAE checkpoint (default OUT/vqvae.lmck)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("generate", help="sample listener responses for speaker clips")
    p.add_argument("--data", help="speaker-input dataset (default OUT/dataset.dlds)")
    p.add_argument("--vqvae", help="VQ-VAE checkpoint (default OUT/vqvae.lmck)")
    p.add_argument("--diffusion", help="diffusion checkpoint (default OUT/diffusion.lmck)")
    p.add_argument("--samples", type=int, help="samples per input")

    p = sub.add_parser("evaluate", help="score generated output against a reference")
    p.add_argument("--generated", help="generated dataset (default OUT/generated.dlds)")
    p.add_argument("--reference", help="reference dataset (default OUT/dataset.dlds)")

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("--checkpoint", required=True)
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train-vqvae": cmd_train_vqvae,
    "train-diffusion": cmd_train_diffusion,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    threads = os.environ.get("LISTENMOTION_THREADS")
    if threads:
        try:
            torch.set_num_threads(int(threads))
        except (ValueError, RuntimeError):
            print(f"ignoring bad LISTENMOTION_THREADS={threads!r}", file=sys.stderr)

    parser = build_parser()
    args = parser.parse_args(argv)
    if args.emit_default_config:
        print(RunConfig().to_json())
        return 0
    if not args.command:
        parser.print_help()
        return 1
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.data.seed = args.seed
        if args.out:
            cfg.out_dir = args.out
        return _COMMANDS[args.command](args, cfg)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (InvalidInput, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, ModelError, DegenerateState) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
