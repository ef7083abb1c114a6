"""Batch command line: texture transfer, toy training, inference, scoring.

Every subcommand that produces file outputs also writes a run manifest
(JSON) next to its primary output, holding the fully resolved config,
seed, paths, and package version, so a run can be reproduced from the
manifest alone.  Exit codes: 0 success, 1 usage error, 2 data or format
error.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .errors import ConfigError, ContractError, GramtexError
from .extractor import DEFAULT_LOSS_TAPS, Extractor
from .generator import (
    Generator,
    GeneratorConfig,
    begin_texture_phase,
    build_generator,
    make_train_state,
    train_step,
)
from .imaging import (
    ImageBuffer,
    bicubic_downsample,
    build_mask_set,
    read_image,
    read_label_map,
    write_image,
)
from .metric import MetricConfig, eval_2afc, image_distance, worker_count, write_report_csv, write_report_json
from .texture import LossConfig, gram
from .transfer import INIT_GIVEN, TransferConfig, optimize_image, write_trace_csv


@dataclasses.dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int
    inputs: dict
    outputs: dict
    version: str = __version__


def write_manifest(manifest, out_path):
    """Serialize the manifest next to the run's primary output."""
    out = Path(out_path)
    path = out.with_name(out.stem + ".manifest.json")
    path.write_text(
        json.dumps(dataclasses.asdict(manifest), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return path


def _load_config_json(path, allowed):
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = set(payload) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return payload


def resolve_config(args, defaults):
    """Defaults, then --config JSON, then explicit flags (flags win)."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        resolved.update(_load_config_json(args.config, defaults))
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _parse_taps(value):
    if isinstance(value, str):
        value = [part.strip() for part in value.split(",") if part.strip()]
    taps = tuple(value)
    if not taps:
        raise ConfigError("tap list is empty")
    return taps


def _loss_config(resolved):
    return LossConfig(taps=_parse_taps(resolved["taps"]))


# ------------------------------------------------------------ subcommands


def cmd_make_weights(args):
    ext = Extractor.random(seed=args.seed)
    ext.save(args.out)
    manifest = RunManifest(
        subcommand="make-weights",
        config={"arch": "vgg19"},
        seed=args.seed,
        inputs={},
        outputs={"weights": str(args.out)},
    )
    write_manifest(manifest, args.out)
    return 0


def cmd_transfer(args):
    resolved = resolve_config(
        args,
        {
            "steps": 500,
            "lr": 5e-4,
            "taps": DEFAULT_LOSS_TAPS,
            "init_mode": INIT_GIVEN,
            "clamp": True,
        },
    )
    resolved["taps"] = _parse_taps(resolved["taps"])
    ext = Extractor.from_weight_file(args.weights)
    style = read_image(args.style).to_tensor()
    init = read_image(args.init).to_tensor() if args.init else None
    masks = None
    if args.label_map:
        masks = build_mask_set(read_label_map(args.label_map))
    config = TransferConfig(
        steps=resolved["steps"],
        lr=resolved["lr"],
        loss_config=_loss_config(resolved),
        masks=masks,
        clamp=resolved["clamp"],
        init_mode=resolved["init_mode"],
    )
    report = optimize_image(init, style, ext, config)
    write_image(args.out, ImageBuffer.from_tensor(report.image))
    trace_path = args.trace or Path(args.out).with_suffix(".csv")
    write_trace_csv(trace_path, report.trace)
    manifest = RunManifest(
        subcommand="transfer",
        config=resolved,
        seed=args.seed,
        inputs={
            "style": str(args.style),
            "init": str(args.init) if args.init else None,
            "label_map": str(args.label_map) if args.label_map else None,
            "weights": str(args.weights),
        },
        outputs={"image": str(args.out), "trace": str(trace_path)},
    )
    write_manifest(manifest, args.out)
    print(f"final loss {report.final_loss!r} after {resolved['steps']} steps")
    return 0


def _load_training_pairs(image_dir, scale):
    paths = sorted(Path(image_dir).glob("*.png")) + sorted(Path(image_dir).glob("*.ppm"))
    if not paths:
        raise ContractError(f"no .png or .ppm images under {image_dir}")
    batch = []
    for path in paths:
        hr = read_image(path).to_tensor()
        lr = T.Tensor(bicubic_downsample(hr.data, scale))
        batch.append((lr, hr))
    return batch, [str(p) for p in paths]


def cmd_sr_train(args):
    resolved = resolve_config(
        args,
        {
            "scale": 4,
            "blocks": 10,
            "width": 64,
            "mse_steps": 200,
            "texture_steps": 200,
            "lr": 5e-4,
            "taps": DEFAULT_LOSS_TAPS,
        },
    )
    resolved["taps"] = _parse_taps(resolved["taps"])
    batch, image_paths = _load_training_pairs(args.images, resolved["scale"])
    gen = build_generator(
        GeneratorConfig(resolved["blocks"], resolved["width"], resolved["scale"]),
        seed=args.seed,
    )
    ext = Extractor.from_weight_file(args.weights) if args.weights else None
    state = make_train_state(gen, lr=resolved["lr"])
    for _ in range(resolved["mse_steps"]):
        state, _loss = train_step(state, batch)
    if resolved["texture_steps"]:
        state = begin_texture_phase(state)
        cfg = _loss_config(resolved)
        for _ in range(resolved["texture_steps"]):
            state, _loss = train_step(state, batch, extractor=ext, loss_config=cfg)
    gen.save(args.out)
    trace_path = args.trace or Path(args.out).with_suffix(".csv")
    write_trace_csv(trace_path, [loss for _, _, loss in state.history])
    manifest = RunManifest(
        subcommand="sr-train",
        config=resolved,
        seed=args.seed,
        inputs={"images": image_paths, "weights": str(args.weights) if args.weights else None},
        outputs={"checkpoint": str(args.out), "trace": str(trace_path)},
    )
    write_manifest(manifest, args.out)
    return 0


def cmd_sr_infer(args):
    gen = Generator.load(args.checkpoint)
    lr = read_image(args.input).to_tensor()
    out = gen.forward(lr)
    write_image(args.out, ImageBuffer.from_tensor(out))
    manifest = RunManifest(
        subcommand="sr-infer",
        config={"blocks": gen.config.blocks, "width": gen.config.width, "scale": gen.config.scale},
        seed=0,
        inputs={"checkpoint": str(args.checkpoint), "input": str(args.input)},
        outputs={"image": str(args.out)},
    )
    write_manifest(manifest, args.out)
    return 0


def cmd_metric(args):
    resolved = resolve_config(args, {"taps": None})
    ext = Extractor.from_weight_file(args.weights)
    taps = _parse_taps(resolved["taps"]) if resolved["taps"] else None
    config = MetricConfig(extractor=ext, taps=taps)
    a = read_image(args.image_a).to_tensor()
    b = read_image(args.image_b).to_tensor()
    distance = image_distance(a, b, config)
    print(repr(float(distance)))
    if args.json:
        Path(args.json).write_text(
            json.dumps({"distance": float(distance)}, indent=2) + "\n", encoding="utf-8"
        )
        manifest = RunManifest(
            subcommand="metric",
            config={"taps": list(config.taps)},
            seed=0,
            inputs={"image_a": str(args.image_a), "image_b": str(args.image_b), "weights": str(args.weights)},
            outputs={"json": str(args.json)},
        )
        write_manifest(manifest, args.json)
    return 0


def cmd_eval_2afc(args):
    resolved = resolve_config(args, {"taps": None, "workers": None})
    ext = Extractor.from_weight_file(args.weights)
    taps = _parse_taps(resolved["taps"]) if resolved["taps"] else None
    config = MetricConfig(extractor=ext, taps=taps)
    workers = resolved["workers"] if resolved["workers"] is not None else worker_count()
    report = eval_2afc(args.manifest, config, workers=workers)
    manifest_path = Path(args.manifest)
    csv_path = args.out_csv or manifest_path.with_suffix(".report.csv")
    json_path = args.out_json or manifest_path.with_suffix(".report.json")
    write_report_csv(csv_path, report)
    write_report_json(json_path, report)
    manifest = RunManifest(
        subcommand="eval-2afc",
        config={"taps": list(config.taps), "workers": workers},
        seed=0,
        inputs={"manifest": str(args.manifest), "weights": str(args.weights)},
        outputs={"csv": str(csv_path), "json": str(json_path)},
    )
    write_manifest(manifest, json_path)
    print(f"2afc score {report.score!r} over {report.count} triplets")
    return 0


def cmd_gram_dump(args):
    ext = Extractor.from_weight_file(args.weights)
    image = read_image(args.image).to_tensor()
    (features,) = ext.forward_with_taps(image, (args.layer,))
    matrix = gram(features, layer=args.layer).matrix.data
    np.savetxt(args.out, matrix, delimiter=",", fmt="%.9e")
    manifest = RunManifest(
        subcommand="gram-dump",
        config={"layer": args.layer},
        seed=0,
        inputs={"image": str(args.image), "weights": str(args.weights)},
        outputs={"csv": str(args.out)},
    )
    write_manifest(manifest, args.out)
    return 0


# ----------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gramtex",
        description="Gram-matrix texture tools: transfer, training, metric, 2AFC.",
    )
    parser.add_argument("--version", action="version", version=f"gramtex {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("make-weights", help="write a seeded random-weight extractor file")
    p.add_argument("out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_weights)

    p = sub.add_parser("transfer", help="optimize an image toward a style's texture")
    p.add_argument("--style", type=Path, required=True)
    p.add_argument("--init", type=Path)
    p.add_argument("--init-mode", dest="init_mode")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--taps")
    p.add_argument("--no-clamp", dest="clamp", action="store_false", default=None)
    p.add_argument("--label-map", type=Path)
    p.add_argument("--weights", "-w", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--trace", type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("sr-train", help="two-phase toy training on an image directory")
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--scale", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--mse-steps", dest="mse_steps", type=int)
    p.add_argument("--texture-steps", dest="texture_steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--taps")
    p.add_argument("--weights", "-w", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--trace", type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sr_train)

    p = sub.add_parser("sr-infer", help="upsample one image with a trained checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sr_infer)

    p = sub.add_parser("metric", help="texture distance between two images")
    p.add_argument("image_a", type=Path)
    p.add_argument("image_b", type=Path)
    p.add_argument("--weights", "-w", type=Path, required=True)
    p.add_argument("--taps")
    p.add_argument("--json", type=Path)
    p.add_argument("--config", type=Path)
    p.set_defaults(func=cmd_metric)

    p = sub.add_parser("eval-2afc", help="score a triplet manifest against human judgments")
    p.add_argument("manifest", type=Path)
    p.add_argument("--weights", "-w", type=Path, required=True)
    p.add_argument("--taps")
    p.add_argument("--workers", type=int)
    p.add_argument("--out-csv", dest="out_csv", type=Path)
    p.add_argument("--out-json", dest="out_json", type=Path)
    p.add_argument("--config", type=Path)
    p.set_defaults(func=cmd_eval_2afc)

    p = sub.add_parser("gram-dump", help="write one layer's Gram matrix as CSV")
    p.add_argument("image", type=Path)
    p.add_argument("--weights", "-w", type=Path, required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gram_dump)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, nonzero for usage errors
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except GramtexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
