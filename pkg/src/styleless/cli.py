"""Command-line entry point.

Subcommands: gen-data, train, eval, pseudo, transfer-demo, stats. Every
command writes only under its --out directory. Exit codes: 0 on success, 1
for user errors (bad flags, bad files, bad config), 2 for internal failures.
The STYLELESS_SEED environment variable overrides the training config seed.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import content_transfer as ct
from . import metrics, pseudolabel, synthdata, trainer
from .datamodel import (
    ClassCatalog,
    Image,
    load_image_png,
    onehot_encode,
    load_label_png,
    save_image_png,
    save_label_png,
)
from .errors import StylelessError, UserInputError
from .networks import (
    NetworkBundle,
    image_to_tensor,
    load_checkpoint,
    probs_to_map,
    translate,
)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_resolution(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
        return (h, w)
    except ValueError:
        raise UserInputError(f"resolution must look like 64x64, got {text!r}")


def _load_nets(path):
    try:
        nets, extra = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UserInputError(f"checkpoint not found: {path}") from exc
    cat_doc = extra.get("catalog")
    if cat_doc:
        catalog = ClassCatalog(names=tuple(cat_doc["names"]), tail_set=frozenset(cat_doc["tail_set"]))
    else:
        catalog = synthdata.toy_catalog()
    return nets, extra, catalog


def _image_paths(directory):
    directory = Path(directory)
    if (directory / "images").is_dir():
        directory = directory / "images"
    if not directory.is_dir():
        raise UserInputError(f"no such image directory: {directory}")
    return sorted(directory.glob("*.png"))


def _predict_indices(nets: NetworkBundle, image: Image) -> np.ndarray:
    with torch.no_grad():
        probs = nets.seg_probs(nets.content(image_to_tensor(image)))
    return probs.squeeze(0).argmax(dim=0).numpy()


def _probs_for(nets: NetworkBundle, image: Image):
    with torch.no_grad():
        probs = nets.seg_probs(nets.content(image_to_tensor(image)))
    return probs_to_map(probs)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    resolution = _parse_resolution(args.resolution)
    catalog = synthdata.toy_catalog()
    domains = ("source", "target") if args.domain == "both" else (args.domain,)
    out.mkdir(parents=True, exist_ok=True)
    synthdata.save_catalog_json(catalog, out / "catalog.json")
    for domain in domains:
        items = (
            synthdata.generate_scene(
                synthdata.SceneSpec(
                    seed=args.seed + i, resolution=resolution, domain=domain, catalog=catalog
                )
            )
            for i in range(args.count)
        )
        root = out / domain
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
        synthdata.save_dataset(root, items)
    print(f"wrote {args.count} scene(s) per domain ({', '.join(domains)}) under {out}")
    return 0


def cmd_train(args) -> int:
    config = trainer.load_run_config(args.config)
    env_seed = os.environ.get("STYLELESS_SEED")
    if env_seed is not None:
        try:
            config.trainer.seed = int(env_seed)
        except ValueError:
            raise UserInputError(f"STYLELESS_SEED must be an integer, got {env_seed!r}")
    result = trainer.run_training(config, args.out, quiet=args.quiet)
    summary = f"checkpoint: {result.checkpoint_path}"
    if result.metrics_history:
        last = result.metrics_history[-1]
        summary += f" | final miou={last['miou']:.4f} miou_tail={last['miou_tail']:.4f}"
    print(summary)
    return 0


def cmd_eval(args) -> int:
    nets, _, catalog = _load_nets(args.checkpoint)
    dataset = synthdata.load_labeled_dataset(args.data, catalog, "target")
    report = metrics.evaluate_dataset(lambda img: _predict_indices(nets, img), dataset, catalog)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(report, indent=2))
    print(f"miou={report['miou']:.4f} miou_tail={report['miou_tail']:.4f} over {report['num_pixels']} px")
    return 0


def cmd_pseudo(args) -> int:
    nets, _, _ = _load_nets(args.checkpoint)
    paths = _image_paths(args.images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in paths:
        image = load_image_png(path, "target")
        pseudo = pseudolabel.generate_pseudo_label(_probs_for(nets, image))
        save_label_png(pseudo.to_indices(), out / path.name)
    print(f"wrote {len(paths)} pseudo label(s) to {out}")
    return 0


def _labeled_item(image_path, domain: str, catalog):
    image_path = Path(image_path)
    label_path = image_path.parent.parent / "labels" / image_path.name
    image = load_image_png(image_path, domain)
    if not label_path.exists():
        return image, None
    return image, onehot_encode(load_label_png(label_path), catalog)


def cmd_transfer_demo(args) -> int:
    nets, extra, catalog = _load_nets(args.checkpoint)
    median = int(extra.get("stats", {}).get("tail_instance_median", 0))
    policy = ct.TransferPolicy(
        tail_set=catalog.tail_set,
        cooccurrence_rules=synthdata.DEFAULT_COOCCURRENCE
        if catalog.tail_set == synthdata.toy_catalog().tail_set
        else (),
        min_tail_instances=median,
    )
    i_s, y_s = _labeled_item(args.source_item, "source", catalog)
    if y_s is None:
        raise UserInputError(f"source item {args.source_item} has no label counterpart")
    i_t, _ = _labeled_item(args.target_item, "target", catalog)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not ct.gate_transfer(y_s, policy):
        print(f"gate: not fired (needs more than {median} tail instances)")
        return 0

    i_s2t = translate(i_s, i_t, "s2t", nets)
    pseudo_t = pseudolabel.generate_pseudo_label(_probs_for(nets, i_t))
    mask = ct.ct_mask(
        ct.head_mask(pseudo_t, catalog), ct.tail_mask(ct.tail_label(y_s, policy))
    )
    i_t_ct = ct.input_transfer(i_s2t, i_t, mask)
    pseudo_ct = pseudolabel.generate_pseudo_label(_probs_for(nets, i_t_ct))
    improved = ct.output_transfer(y_s, pseudo_ct, mask)

    save_image_png(i_t, out / "target.png")
    save_image_png(i_s2t, out / "translated_source.png")
    save_image_png(i_t_ct, out / "transferred.png")
    save_label_png(mask.mask * 255, out / "mask.png")
    save_label_png(improved.to_indices(), out / "improved_pseudo.png")
    print(f"gate: fired; wrote triptych + mask + improved pseudo label to {out}")
    return 0


def cmd_stats(args) -> int:
    data = Path(args.data)
    catalog_path = data / "catalog.json"
    catalog = (
        synthdata.load_catalog_json(catalog_path)
        if catalog_path.exists()
        else synthdata.toy_catalog()
    )
    dataset = synthdata.load_labeled_dataset(data, catalog, "source")
    stats = synthdata.compute_stats(dataset, catalog)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(stats.to_json(catalog))
    print(
        f"pixels per class: {stats.pixel_counts.tolist()} | "
        f"tail instance median: {stats.tail_instance_median}"
    )
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="styleless", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a twin-domain synthetic dataset")
    p.add_argument("--out", required=True, help="output root directory")
    p.add_argument("--count", type=int, default=16, help="scenes per domain")
    p.add_argument("--seed", type=int, default=0, help="base scene seed")
    p.add_argument("--resolution", default="64x64", help="HxW, e.g. 64x64")
    p.add_argument("--domain", choices=("both", "source", "target"), default="both")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run the two-stage training loop")
    p.add_argument("--config", required=True, help="TOML run config")
    p.add_argument("--out", required=True, help="output directory for logs/checkpoint")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root with images/ and labels/")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pseudo", help="export pseudo labels for a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="directory of PNGs (or dataset root)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pseudo)

    p = sub.add_parser("transfer-demo", help="run content transfer on one source/target pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source-item", required=True, help="path to a source image PNG")
    p.add_argument("--target-item", required=True, help="path to a target image PNG")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_transfer_demo)

    p = sub.add_parser("stats", help="dataset statistics (pixel counts, tail median)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except UserInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StylelessError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # unexpected failure is still an internal error
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
