"""Command-line entry point.

Machine-readable results (JSON) go to stdout; progress and human-readable
notes go to stderr.  Exit codes: 0 success, 2 usage or config error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib as tomli
except ModuleNotFoundError:
    import tomli

from .config import PRESETS, LossWeights, ModelConfig, OptimConfig, RunConfig
from .denoising import Polarity, gen_pose_queries
from .geometry import KsParams, instance_oks
from .model import PoseModel
from .scenes import SceneSpec, gen_dataset, normalized_instances
from .serialization import (
    load_checkpoint,
    read_annotations,
    save_checkpoint,
    write_annotations,
)
from .tensor import NumericError
from .training import evaluate_model, train_loop
from .verify import end_to_end_grad_check

__all__ = ["main"]

GRAD_TOLERANCE = 1e-3


class ConfigError(ValueError):
    pass


def _build_section(cls, data: dict, section: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown key '{section}.{sorted(unknown)[0]}'")
    coerced = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            coerced[f.name] = tuple(coerced[f.name])
    return cls(**coerced)


def load_run_config(path) -> RunConfig:
    try:
        with Path(path).open("rb") as fh:
            data = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config syntax: {exc}") from exc
    known_sections = {"model", "optim", "loss", "run"}
    unknown = set(data) - known_sections
    if unknown:
        raise ConfigError(f"unknown section '{sorted(unknown)[0]}'")
    model_data = dict(data.get("model", {}))
    preset = model_data.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (choose from {sorted(PRESETS)})")
        base = PRESETS[preset]
        model = dataclasses.replace(base, **_section_kwargs(ModelConfig, model_data, "model"))
    else:
        model = _build_section(ModelConfig, model_data, "model")
    optim = _build_section(OptimConfig, dict(data.get("optim", {})), "optim")
    loss = _build_section(LossWeights, dict(data.get("loss", {})), "loss")
    run_data = dict(data.get("run", {}))
    if "seed" not in run_data:
        raise ConfigError("missing key 'run.seed'")
    run_fields = {f.name for f in dataclasses.fields(RunConfig)} - {"model", "optim", "loss"}
    unknown = set(run_data) - run_fields
    if unknown:
        raise ConfigError(f"unknown key 'run.{sorted(unknown)[0]}'")
    return RunConfig(model=model, optim=optim, loss=loss, **run_data)


def _section_kwargs(cls, data: dict, section: str) -> dict:
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown key '{section}.{sorted(unknown)[0]}'")
    out = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in out and isinstance(out[f.name], list):
            out[f.name] = tuple(out[f.name])
    return out


def _load_dataset(data_dir: Path):
    annotations = read_annotations(data_dir / "annotations.jsonl")
    tensors = load_checkpoint(data_dir / "scenes.ntc")
    images = [tensors[f"scene/{ann.scene_id:05d}"] for ann in annotations]
    return images, annotations


def cmd_gen_data(args) -> int:
    spec = SceneSpec(
        img_size=args.img_size,
        max_persons=args.max_persons,
        num_keypoints=args.keypoints,
        seed=args.seed,
    )
    images, annotations = gen_dataset(spec, args.num)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_annotations(out / "annotations.jsonl", annotations)
        save_checkpoint(
            out / "scenes.ntc",
            {f"scene/{ann.scene_id:05d}": img for img, ann in zip(images, annotations)},
        )
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"scenes": len(annotations)}))
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    images, annotations = _load_dataset(Path(args.data))
    model = PoseModel(run.model, seed=run.seed)
    result = train_loop(model, images, annotations, run, denoising=not args.no_dn)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.ntc", {k: p.data for k, p in model.parameters().items()})
    with (out / "trace.jsonl").open("w", encoding="utf-8") as fh:
        for record in result.trace:
            fh.write(json.dumps(record) + "\n")
    final = result.trace[-1]["total"] if result.trace else None
    print(json.dumps({"iterations": run.iterations, "final_loss": final}))
    return 0


def cmd_eval(args) -> int:
    run = load_run_config(args.config)
    images, annotations = _load_dataset(Path(args.data))
    model = PoseModel(run.model, seed=run.seed)
    weights = load_checkpoint(args.checkpoint)
    for name, p in model.parameters().items():
        if name not in weights:
            raise ConfigError(f"checkpoint missing tensor '{name}'")
        if tuple(weights[name].shape) != p.shape:
            raise ConfigError(f"checkpoint tensor '{name}' has shape {weights[name].shape}, expected {p.shape}")
        p.data = weights[name].astype(np.float32)
    params = KsParams.uniform(run.model.num_keypoints, run.model.kappa)
    report = evaluate_model(model, images, annotations, params)
    print(json.dumps(report.as_dict()))
    return 0


def cmd_dn_sample(args) -> int:
    polarity = Polarity.POSITIVE if args.polarity == "pos" else Polarity.NEGATIVE
    spec = SceneSpec(img_size=160, max_persons=1, num_keypoints=args.keypoints, seed=args.seed)
    images, annotations = gen_dataset(spec, max(1, args.num // 4 + 1))
    params = KsParams.uniform(args.keypoints, args.kappa)
    rng = np.random.default_rng(args.seed)
    gts = [g for ann in annotations for g in normalized_instances(ann)]
    records = []
    for i in range(args.num):
        gt = gts[i % len(gts)]
        sample = gen_pose_queries(gt, polarity, params, rng)
        recomputed = instance_oks(sample.instance, gt, params)
        records.append(
            {
                "polarity": sample.polarity.value,
                "sampled_ks": sample.sampled_ks,
                "recomputed_ks": recomputed,
                "keypoints": [[kp.x, kp.y, int(kp.visible)] for kp in sample.instance.keypoints],
            }
        )
    for record in records:
        print(json.dumps(record))
    return 0


def cmd_grad_check(args) -> int:
    config = PRESETS[args.preset]
    if args.queries:
        config = dataclasses.replace(config, num_queries=args.queries)
    report = end_to_end_grad_check(
        config, seed=args.seed, samples_per_block=args.samples, img_size=args.img_size
    )
    worst_name = max(report, key=report.get)
    for name in sorted(report):
        print(f"{name}\t{report[name]:.3e}", file=sys.stderr)
    print(json.dumps({"worst_block": worst_name, "worst_error": report[worst_name]}))
    if report[worst_name] > GRAD_TOLERANCE:
        return 3
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poselab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--img-size", type=int, default=160)
    p.add_argument("--max-persons", type=int, default=4)
    p.add_argument("--keypoints", type=int, default=5)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-dn", action="store_true", help="disable pose denoising")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; prints AP report JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dn-sample", help="dump denoising query samples as JSON")
    p.add_argument("--num", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--polarity", choices=("pos", "neg"), required=True)
    p.add_argument("--keypoints", type=int, default=5)
    p.add_argument("--kappa", type=float, default=0.1)
    p.set_defaults(func=cmd_dn_sample)

    p = sub.add_parser("grad-check", help="finite-difference check of the full model")
    p.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    p.add_argument("--queries", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--img-size", type=int, default=64)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
