"""Command-line entry point: ``treatnet <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as B
from .autodiff import TrainConfig, TrainReport, evaluate, train
from .controller import Behavior, ControllerConfig, read_events_csv, simulate
from .data import (
    AugmentSpec,
    Label,
    ManifestEntry,
    SplitSpec,
    augment_image,
    encode_ppm,
    load_images,
    load_manifest,
    read_ppm,
    resize_bilinear,
    stratified_split,
    write_manifest,
)
from .errors import TreatNetError
from .graph import build_convnet, flop_count, param_count
from .interpret import gradcam, integrated_gradients, write_attribution
from .quantize import (
    QuantScheme,
    deserialize,
    model_size_bytes,
    quantize,
    quantized_forward,
    quantized_predict,
    serialize,
)
from .synthetic import synthetic_splits

log = logging.getLogger("treatnet")

IO_EXIT_CODE = 9


def _splits_from_manifest(manifest, seed):
    entries = [e for e in load_manifest(manifest) if not e.undefined]
    return stratified_split(entries, SplitSpec(seed=seed))


def cmd_train(manifest, resolution=256, epochs=35, batch=32, lr=1e-4, seed=0, out_model="model.cnm",
              report_path=None, augment=True):
    """Train a ConvNet on a manifest; write a standard32 CNM1 file and a CSV report."""
    model = build_convnet(resolution, seed=seed)
    report = TrainReport()
    if epochs > 0:
        splits = _splits_from_manifest(manifest, seed)
        train_set = load_images(splits["train"], resolution)
        val_set = load_images(splits["val"], resolution)
        log.info("training on %d samples, validating on %d", len(train_set), len(val_set))
        report = train(model, train_set, val_set,
                       TrainConfig(epochs, batch, lr, augment, seed),
                       augment_fn=augment_image(AugmentSpec()))
    serialize(quantize(model.eval(), QuantScheme.STANDARD32), out_model)
    if report_path is not None:
        Path(report_path).write_text(report.to_csv())
    return report


def _select_split(manifest, split, seed):
    if split == "all":
        return [e for e in load_manifest(manifest) if not e.undefined]
    return _splits_from_manifest(manifest, seed)[split]


def cmd_eval(model_file, manifest, split="test", seed=0):
    qm = deserialize(model_file)
    data = load_images(_select_split(manifest, split, seed), qm.input_shape[0])
    return evaluate(qm.graph, data, predict_fn=lambda x: quantized_predict(qm, x))


def cmd_quantize(in_model, scheme, out_model):
    qm = deserialize(in_model)
    out = quantize(qm.graph, QuantScheme.parse(scheme), qm.class_names)
    return serialize(out, out_model)


def cmd_bench(model_file, iterations=B.BENCH_ITERATIONS, seed=0, manifest=None, split="test"):
    """Cached-random-image FPS, plus size, parameter and FLOP accounting.

    Model loading and image generation happen before the clock starts.
    """
    qm = deserialize(model_file)
    image = B.random_image(qm.input_shape, seed)
    timing = B.time_inference(lambda x: quantized_forward(qm, x), image, iterations)
    accuracy = None
    if manifest is not None:
        accuracy = cmd_eval(model_file, manifest, split, seed).accuracy
    return B.BenchResult(Path(model_file).stem, qm.scheme.label, timing.fps, model_size_bytes(qm),
                         accuracy, param_count(qm.graph), flop_count(qm.graph))


def _load_image(path, size):
    img = read_ppm(path)
    return np.clip(resize_bilinear(img, size), 0.0, 1.0)


def cmd_attribute(model_file, image_path, method="ig", target_class=None, steps=64, layer=None,
                  out_prefix="attribution", baseline=None):
    qm = deserialize(model_file)
    model = qm.graph
    image = _load_image(image_path, qm.input_shape[:2])
    if target_class is None:
        target_class = int(quantized_forward(qm, image[None])[0].argmax())
    if method in ("ig", "integrated_gradients"):
        base = None if baseline is None else _load_image(baseline, qm.input_shape[:2])
        amap = integrated_gradients(model, image, target_class, steps, base)
    elif method == "gradcam":
        amap = gradcam(model, image, target_class, layer)
    else:
        raise TreatNetError(f"unknown attribution method {method!r}; use ig or gradcam")
    write_attribution(amap, f"{out_prefix}.pgm", f"{out_prefix}.csv")
    return amap


def cmd_simulate(events_csv, config=ControllerConfig(), decisions_out=None, bus_out=None):
    result = simulate(read_events_csv(Path(events_csv).read_text()), config)
    if decisions_out is not None:
        Path(decisions_out).write_text(result.decisions_csv())
    if bus_out is not None:
        Path(bus_out).write_text(result.bus_log())
    return result


def cmd_synth(out_dir, size=64, seed=0, n=800):
    """Write a generated bar/blob image set as PPM files plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_train = round(0.75 * n)
    n_val = round(0.10 * n)
    splits = synthetic_splits(size, seed, n_train, n_val, n - n_train - n_val)
    entries = []
    for name, (data, _) in splits.items():
        for i, (img, label) in enumerate(zip(data.images, data.labels)):
            path = out_dir / f"{name}_{i:05d}.ppm"
            path.write_bytes(encode_ppm(img))
            entries.append(ManifestEntry(str(path), Label(int(label))))
    write_manifest(out_dir / "manifest.csv", entries)
    return out_dir / "manifest.csv"


# -- argument parsing ----------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="treatnet", description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train the ConvNet on a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--resolution", type=int, default=256, choices=(32, 64, 256))
    s.add_argument("--epochs", type=int, default=35)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--report")

    s = sub.add_parser("eval", help="accuracy and confusion matrix")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", choices=("train", "val", "test", "all"), default="test")

    s = sub.add_parser("quantize", help="re-store a model under another scheme")
    s.add_argument("--in", dest="in_model", required=True)
    s.add_argument("--scheme", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("bench", help="single-image FPS on a cached random image")
    s.add_argument("--model", required=True)
    s.add_argument("--iterations", type=int, default=B.BENCH_ITERATIONS)
    s.add_argument("--manifest")
    s.add_argument("--split", choices=("train", "val", "test", "all"), default="test")

    s = sub.add_parser("table", help="benchmark several models into one table")
    s.add_argument("models", nargs="+")
    s.add_argument("--iterations", type=int, default=B.BENCH_ITERATIONS)
    s.add_argument("--manifest")
    s.add_argument("--split", choices=("train", "val", "test", "all"), default="test")

    s = sub.add_parser("attribute", help="GradCAM or integrated gradients map")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--method", choices=("ig", "gradcam"), default="ig")
    s.add_argument("--class", dest="target_class", type=int)
    s.add_argument("--steps", type=int, default=64)
    s.add_argument("--layer", type=int)
    s.add_argument("--baseline", help="PPM baseline image (default: all zeros)")
    s.add_argument("--out", default="attribution")

    s = sub.add_parser("simulate", help="replay an event CSV through the controller")
    s.add_argument("--events", required=True)
    s.add_argument("--window", type=int, default=15)
    s.add_argument("--majority", type=int, default=12)
    s.add_argument("--refractory-ms", type=int, default=10_000)
    s.add_argument("--min-confidence", type=float, default=0.0)
    s.add_argument("--dwell-ms", type=int, default=400)
    s.add_argument("--reward", default="sitting,lying")
    s.add_argument("--out", help="decisions CSV (default: stdout)")
    s.add_argument("--bus", help="virtual-bus register log")

    s = sub.add_parser("synth", help="write a generated bar/blob dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--count", type=int, default=800)
    return p


def _run(args):
    fmt = args.format
    if args.command == "train":
        report = cmd_train(args.manifest, args.resolution, args.epochs, args.batch, args.lr,
                           args.seed, args.out, args.report, not args.no_augment)
        if report.epochs:
            last = report.epochs[-1]
            print(f"epochs={len(report.epochs)} val_acc={last.val_acc:.4f} val_loss={last.val_loss:.4f}")
        print(f"wrote {args.out}")
    elif args.command == "eval":
        res = cmd_eval(args.model, args.manifest, args.split, args.seed)
        print(f"accuracy {res.accuracy:.4f}")
        for row in res.confusion:
            print(" ".join(f"{v:6d}" for v in row))
    elif args.command == "quantize":
        size = cmd_quantize(args.in_model, args.scheme, args.out)
        print(f"wrote {args.out} ({size} bytes)")
    elif args.command == "bench":
        res = cmd_bench(args.model, args.iterations, args.seed, args.manifest, args.split)
        sys.stdout.write(B.emit_table([res], fmt))
    elif args.command == "table":
        rows = [cmd_bench(m, args.iterations, args.seed, args.manifest, args.split)
                for m in args.models]
        sys.stdout.write(B.emit_table(rows, fmt))
    elif args.command == "attribute":
        amap = cmd_attribute(args.model, args.image, args.method, args.target_class, args.steps,
                             args.layer, args.out, args.baseline)
        extra = ""
        if amap.completeness_gap is not None:
            extra = f" completeness_gap={amap.completeness_gap:.6g} score_delta={amap.score_delta:.6g}"
        print(f"wrote {args.out}.pgm {args.out}.csv class={amap.target_class}{extra}")
    elif args.command == "simulate":
        reward = frozenset(Behavior.parse(x) for x in args.reward.split(",") if x.strip())
        config = ControllerConfig(args.window, args.majority, reward, args.refractory_ms,
                                  args.min_confidence, args.dwell_ms)
        res = cmd_simulate(args.events, config, args.out, args.bus)
        if args.out is None:
            sys.stdout.write(res.decisions_csv())
    elif args.command == "synth":
        path = cmd_synth(args.out, args.size, args.seed, args.count)
        print(f"wrote {path}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except TreatNetError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error[{exc.family}]: {msg}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[io]: {exc}".replace("\n", " "), file=sys.stderr)
        return IO_EXIT_CODE
    return 0


if __name__ == "__main__":
    sys.exit(main())
