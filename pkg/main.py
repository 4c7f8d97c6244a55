#!/usr/bin/env python3
"""
pin-adapt - Main Launcher
Zero-shot adaptation of a segmentation model from one vision-language embedding.

STAGES (each writes its own artifact under --out):
- mine          mine a style bank against a prompt, a target photo, or a concept + suffix
- concept       optimize a <concept> token on source images
- train-source  source-only training of the segmentation head
- adapt         fine-tune the head on bank-stylized source features
- eval          mIoU report for one or more checkpoints
- augment       bank diversity report + augmented low-level feature cache
- toy-e2e       the whole pipeline on the synthetic toy dataset
- show-config   print the fully resolved run configuration

Exit codes: 0 ok, 2 usage/validation, 3 runtime failure.
"""

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import yaml
from dotenv import load_dotenv

from adaptation import (
    FeatureCache,
    Segmenter,
    augment_features,
    finetune_classifier,
    load_checkpoint,
    save_checkpoint,
    source_only_g_train,
    train_source,
)
from concept_opt import DEFAULT_SUFFIX, build_concept_prompt_embedding, load_concept, optimize_concept, save_concept
from encoder_backends import BACKEND_CHOICES, EncoderBackend, Prompt, build_backend, mean_image_embedding
from errors import PinAdaptError, StageError, ValidationError
from evaluation import aggregate_reports, evaluate_model, save_report
from pipeline_io import (
    DatasetSpec,
    SegDataset,
    decode_image,
    generate_toy_dataset,
    load_dataset,
    open_dataset,
)
from run_config import RunConfig, load_run_config, save_resolved_config, seed_everything
from style_mining import TargetDescriptor, bank_diversity_report, load_bank, mine_bank, save_bank
from tracing import configure_tracing, shutdown_tracing, stage_span

load_dotenv()

def _say(message: str) -> None:
    print(f"[CLI] {message}", file=sys.stderr, flush=True)


def print_banner():
    """Print launcher banner"""
    print("=" * 80, file=sys.stderr)
    print("   pin-adapt", file=sys.stderr)
    print("   Style mining + classifier fine-tuning for zero-shot domain adaptation", file=sys.stderr)
    print("=" * 80, file=sys.stderr)


# --- shared helpers ---------------------------------------------------------


def _resolve(args) -> RunConfig:
    if args.command == "toy-e2e" and not args.config and not args.preset:
        args.preset = "toy"
    if hasattr(args, "dataset") and not args.dataset:
        args.dataset = "target" if args.command == "eval" else "source"
    base = RunConfig.toy() if args.preset == "toy" else RunConfig.reference() if args.preset == "reference" else None
    config = load_run_config(args.config, seed=args.seed, base=base)
    if args.backend:
        config.backend = args.backend
    if args.workers:
        config.workers = args.workers
    return config.validate()


def _prepare_out(args, config: RunConfig) -> Path:
    out = Path(args.out)
    path = save_resolved_config(config, out)
    _say(f"Resolved config (seed {config.seed}) written to {path}")
    return out


def _backend(config: RunConfig) -> EncoderBackend:
    backend = build_backend(config.backend, config.layer_split, os.getenv("PINADAPT_MODEL_DIR"))
    _say(f"Backend: {backend.id}")
    return backend


def _samples(spec: DatasetSpec, limit: Optional[int]) -> SegDataset:
    return open_dataset(spec, limit)


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(payload: Dict, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path


# --- commands ---------------------------------------------------------------


def _target_embedding(args, config: RunConfig, backend: EncoderBackend):
    if args.prompt is not None:
        embedding = backend.embed_text(Prompt(args.prompt, config.template_set))
        digest = hashlib.sha256(args.prompt.encode("utf-8")).hexdigest()
        return embedding, TargetDescriptor(kind="prompt", value=args.prompt, content_hash=digest)
    if args.image is not None:
        image = decode_image(Path(args.image))
        embedding = backend.embed_image(image)
        embedding = embedding / torch.linalg.vector_norm(embedding)
        return embedding, TargetDescriptor(kind="image", value=str(args.image), content_hash=_sha256_file(args.image))
    concept = load_concept(args.concept)
    embedding = build_concept_prompt_embedding(concept, args.suffix, backend)
    digest = hashlib.sha256(concept.tokens.numpy().astype("<f4").tobytes() + args.suffix.encode("utf-8"))
    return embedding, TargetDescriptor(
        kind="concept+suffix", value=f"<concept> {args.suffix}", content_hash=digest.hexdigest()
    )


def cmd_mine(args, config: RunConfig) -> int:
    if args.concept is not None and not args.suffix:
        raise ValidationError("--concept needs --suffix (e.g. --suffix 'at night')")
    if args.suffix and args.concept is None:
        raise ValidationError("--suffix is only used together with --concept")
    out = _prepare_out(args, config)
    backend = _backend(config)
    spec = config.dataset(args.dataset)
    config.validate_paths([args.dataset])

    with stage_span("mine", {"encoder_id": backend.id, "dataset": args.dataset}):
        target_emb, target = _target_embedding(args, config, backend)
        features = (backend.extract_low_features(sample.image) for sample in _samples(spec, args.limit))
        bank = mine_bank(
            features, target_emb, config.mining, backend, target, spec.crop_policy, workers=config.workers
        )
        save_bank(bank, out / "bank")
    _say(f"Target kind: {target['kind']}")
    _say(f"sigma_nonpositive_total: {bank.manifest['sigma_nonpositive_total']}")
    return 0


def cmd_concept(args, config: RunConfig) -> int:
    out = _prepare_out(args, config)
    backend = _backend(config)
    spec = config.dataset(args.dataset)
    config.validate_paths([args.dataset])
    with stage_span("concept", {"encoder_id": backend.id}):
        images = (sample.image for sample in _samples(spec, args.limit))
        concept = optimize_concept(images, backend, config.concept, args.suffix or DEFAULT_SUFFIX)
        save_concept(concept, out / "concept")
    _say(f"Concept saved to {out / 'concept'} (final loss {concept.loss_history[-1]:.5f})")
    return 0


def cmd_train_source(args, config: RunConfig) -> int:
    out = _prepare_out(args, config)
    backend = _backend(config)
    spec = config.dataset(args.dataset)
    config.validate_paths([args.dataset])
    seed_everything(config.seed)
    with stage_span("train-source", {"encoder_id": backend.id}):
        model = Segmenter(backend, spec.num_classes, config.trainable_stages, config.head_width, spec.ignore_index)
        train_source(model, _samples(spec, args.limit), config.source_train)
        save_checkpoint(model, out / "checkpoint", config.to_dict())
    return 0


def cmd_adapt(args, config: RunConfig) -> int:
    if args.bank is None and not args.source_only_g:
        raise ValidationError("adapt needs --bank, or --source-only-g for the bank-free baseline")
    out = _prepare_out(args, config)
    backend = _backend(config)
    spec = config.dataset(args.dataset)
    config.validate_paths([args.dataset])
    seed_everything(config.seed)
    with stage_span("adapt", {"encoder_id": backend.id, "bank": args.bank}):
        model = load_checkpoint(args.checkpoint, backend)
        cache = None
        if args.feature_cache:
            cache = FeatureCache.build(backend, _samples(spec, args.limit), Path(args.feature_cache))
        if args.source_only_g:
            source_only_g_train(model, _samples(spec, args.limit), config.adapt, args.snr_db, feature_cache=cache)
        if args.bank is not None:
            bank = load_bank(args.bank)
            finetune_classifier(model, _samples(spec, args.limit), bank, config.adapt, feature_cache=cache)
        save_checkpoint(model, out / "checkpoint", config.to_dict())
    return 0


def cmd_eval(args, config: RunConfig) -> int:
    out = _prepare_out(args, config)
    backend = _backend(config)
    spec = config.dataset(args.dataset)
    config.validate_paths([args.dataset])
    reports = []
    with stage_span("eval", {"encoder_id": backend.id, "checkpoints": len(args.checkpoint)}):
        for index, checkpoint in enumerate(args.checkpoint):
            model = load_checkpoint(checkpoint, backend)
            report = evaluate_model(
                model, _samples(spec, args.limit), spec.num_classes, config.seed, config.to_dict(), config.workers
            )
            report["checkpoint"] = str(checkpoint)
            save_report(report, out / f"report_{index}.json")
            reports.append(report)
        if len(reports) > 1:
            summary = aggregate_reports(reports)
            save_report(summary, out / "aggregate.json")
            _say(f"mIoU {100 * summary['miou_mean']:.2f} +/- {100 * summary['miou_std']:.2f} over {len(reports)} runs")
    return 0


def cmd_augment(args, config: RunConfig) -> int:
    out = _prepare_out(args, config)
    backend = _backend(config)
    spec = config.dataset(args.dataset)
    config.validate_paths([args.dataset])
    with stage_span("augment", {"encoder_id": backend.id, "bank": args.bank}):
        bank = load_bank(args.bank)
        if bank.manifest["encoder_id"] != backend.id:
            raise ValidationError(f"bank was mined with '{bank.manifest['encoder_id']}', backend is '{backend.id}'")
        if len(bank) >= 2:
            _write_json(bank_diversity_report(bank).to_dict(), out / "diversity.json")
        else:
            _say("[WARN] diversity needs at least 2 styles; skipping the report")
        generator = torch.Generator().manual_seed(config.adapt.seed)
        features_dir = out / "features"
        features_dir.mkdir(parents=True, exist_ok=True)
        count = 0
        for sample in _samples(spec, args.limit):
            low = backend.extract_low_features(sample.image)
            augmented = augment_features(low, bank, config.adapt, generator)
            np.save(features_dir / f"{count:06d}.features.npy", augmented.cpu().numpy())
            np.save(features_dir / f"{count:06d}.label.npy", sample.label.numpy())
            count += 1
    _say(f"Wrote {count} augmented feature maps to {features_dir}")
    return 0


def _toy_run(seed: int, config: RunConfig, out: Path, n_train: int, n_val: int) -> Dict:
    from encoder_backends import ToyBackend

    run_config = config.with_seed(seed)
    seed_everything(seed)
    datasets = generate_toy_dataset(out / "data", seed, n_train, n_val)
    backend = ToyBackend(layer_split=config.layer_split)
    num_classes = datasets.train.num_classes

    train_samples = open_dataset(datasets.train)
    model = Segmenter(backend, num_classes, config.trainable_stages, config.head_width)
    train_source(model, train_samples, run_config.source_train)
    save_checkpoint(model, out / "source", run_config.to_dict())
    clean = evaluate_model(model, load_dataset(datasets.val), num_classes, seed)
    source = evaluate_model(model, load_dataset(datasets.shifted_val), num_classes, seed)

    target_emb = mean_image_embedding(backend, (sample.image for sample in load_dataset(datasets.shifted_train)))
    features = (backend.extract_low_features(sample.image) for sample in train_samples)
    target = TargetDescriptor(kind="embedding", value="mean of shifted/train images")
    bank = mine_bank(features, target_emb, run_config.mining, backend, target, workers=config.workers)
    save_bank(bank, out / "bank")

    adapted_model = load_checkpoint(out / "source", backend)
    finetune_classifier(adapted_model, train_samples, bank, run_config.adapt)
    save_checkpoint(adapted_model, out / "adapted", run_config.to_dict())
    adapted = evaluate_model(adapted_model, load_dataset(datasets.shifted_val), num_classes, seed)

    result = {
        "seed": seed,
        "clean_val_source_miou": clean["miou"],
        "source_miou": source["miou"],
        "adapted_miou": adapted["miou"],
        "delta": adapted["miou"] - source["miou"],
    }
    _say(
        f"seed {seed}: source-only {100 * source['miou']:.2f} -> adapted {100 * adapted['miou']:.2f} "
        f"({100 * result['delta']:+.2f} mIoU points)"
    )
    return result


def cmd_toy_e2e(args, config: RunConfig) -> int:
    if config.backend != "toy":
        raise ValidationError(f"toy-e2e runs on the toy backend, config selects '{config.backend}'")
    out = _prepare_out(args, config)
    seeds = args.seeds or [config.seed]
    runs: List[Dict] = []
    for seed in seeds:
        with stage_span("toy-e2e", {"seed": seed}):
            runs.append(_toy_run(seed, config, out / f"seed_{seed}", args.n_train, args.n_val))
    deltas = np.array([r["delta"] for r in runs])
    report = {"runs": runs, "mean_delta": float(deltas.mean()), "seeds": seeds}
    _write_json(report, out / "toy_e2e_report.json")
    _say(f"Mean gain over {len(seeds)} seed(s): {100 * report['mean_delta']:+.2f} mIoU points")
    if report["mean_delta"] <= 0:
        raise PinAdaptError("adapted model does not beat source-only on the shifted toy validation set")
    return 0


def cmd_show_config(args, config: RunConfig) -> int:
    if args.out:
        _prepare_out(args, config)
    yaml.safe_dump(config.to_dict(), sys.stdout, sort_keys=False)
    return 0


HANDLERS = {
    "mine": cmd_mine,
    "concept": cmd_concept,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "augment": cmd_augment,
    "toy-e2e": cmd_toy_e2e,
    "show-config": cmd_show_config,
}


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--preset", choices=("toy", "reference"), help="start from a built-in config")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--backend", choices=BACKEND_CHOICES, help="overrides the config's backend")
    common.add_argument("--workers", type=int, help="worker threads")

    staged = argparse.ArgumentParser(add_help=False, parents=[common])
    staged.add_argument("--out", required=True, help="output directory")
    staged.add_argument("--dataset", help="dataset name in the config (default: source; target for eval)")
    staged.add_argument("--limit", type=int, help="use only the first N samples")

    parser = argparse.ArgumentParser(prog="pin-adapt", description="Zero-shot domain adaptation via style mining")
    sub = parser.add_subparsers(dest="command", required=True)

    mine = sub.add_parser("mine", parents=[staged], help="mine a style bank")
    guidance = mine.add_mutually_exclusive_group(required=True)
    guidance.add_argument("--prompt", help='target description, e.g. "driving at night"')
    guidance.add_argument("--image", help="one unlabeled target photo")
    guidance.add_argument("--concept", help="concept directory from the concept command")
    mine.add_argument("--suffix", help="style suffix appended to the concept")

    concept = sub.add_parser("concept", parents=[staged], help="optimize a concept token")
    concept.add_argument("--suffix", default=DEFAULT_SUFFIX, help="suffix used during training")

    sub.add_parser("train-source", parents=[staged], help="source-only training")

    adapt = sub.add_parser("adapt", parents=[staged], help="fine-tune the classifier")
    adapt.add_argument("--checkpoint", required=True, help="source-trained checkpoint directory")
    adapt.add_argument("--bank", help="style bank directory")
    adapt.add_argument("--source-only-g", action="store_true", help="Gaussian perturbation of own statistics")
    adapt.add_argument("--snr-db", type=float, default=20.0, help="SNR for --source-only-g")
    adapt.add_argument("--feature-cache", help="cache low-level features as .npy files here")

    evaluate = sub.add_parser("eval", parents=[staged], help="mIoU report")
    evaluate.add_argument("--checkpoint", required=True, nargs="+", help="one or more checkpoint directories")

    augment = sub.add_parser("augment", parents=[staged], help="diversity report + augmented features")
    augment.add_argument("--bank", required=True, help="style bank directory")

    toy = sub.add_parser("toy-e2e", parents=[common], help="desk-scale end-to-end experiment")
    toy.add_argument("--out", default="runs/toy-e2e", help="output directory")
    toy.add_argument("--seeds", type=int, nargs="+", help="run once per seed and average")
    toy.add_argument("--n-train", type=int, default=64)
    toy.add_argument("--n-val", type=int, default=32)

    show = sub.add_parser("show-config", parents=[common], help="print the resolved config")
    show.add_argument("--out", help="also write resolved_config.yaml here")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command != "show-config":
        print_banner()
    configure_tracing()
    try:
        config = _resolve(args)
        try:
            return HANDLERS[args.command](args, config)
        except PinAdaptError:
            raise
        except Exception as error:
            raise StageError(args.command, error) from error
    except PinAdaptError as error:
        print(f"[ERROR] {error}", file=sys.stderr, flush=True)
        return error.exit_code
    finally:
        shutdown_tracing()


if __name__ == "__main__":
    sys.exit(main())
