"""Command-line entry point: ``lwdet <command> [flags]``."""

import argparse
import os
import sys
from collections import Counter
from pathlib import Path

from . import dataset as ds
from .detect import DEFAULT_CONF, DEFAULT_NMS_IOU, format_detections, parse_detections
from .estimator import check_threshold, detect_image
from .evaluation import CLASS_NAMES, EVAL_IOU, bench_fps, evaluate, export_pr_curve, format_summary
from .model import (
    REFERENCE_FLOPS_G,
    REFERENCE_PARAMS_M,
    ModelSpec,
    build_model,
    count_flops,
    count_params,
    count_running_stats,
    init_weights,
    load_weights,
    save_weights,
)

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2


class InputError(Exception):
    pass


def _threshold(name):
    def parse(text):
        try:
            return check_threshold(text, name)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return parse


def _seed(text):
    v = int(text, 0)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError(f"seed must be a 64-bit unsigned integer, got {text}")
    return v


def _spec(args):
    return ModelSpec(input_size=args.input_size, nc=args.nc)


def _load_model(args):
    if not os.path.isfile(args.weights):
        raise InputError(f"weights file not found: {args.weights}")
    return load_weights(_spec(args), args.weights)


def _read_image(path):
    return ds.read_ppm(Path(path).read_bytes())


def _load_corpus(images_dir, labels_dir):
    corpus = []
    for img_path in sorted(Path(images_dir).glob("*.ppm")):
        img = _read_image(img_path)
        lbl = Path(labels_dir) / f"{img_path.stem}.txt"
        text = lbl.read_text() if lbl.exists() else ""
        ann = ds.from_yolo_txt(text, img.width, img.height, img_path.stem)
        corpus.append(ds.Sample(img, ann))
    return corpus


def cmd_convert(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = Counter()
    failures = []
    for xml in sorted(Path(args.voc_dir).glob("*.xml")):
        try:
            ann = ds.parse_voc_xml(xml.read_bytes(), image_id=xml.stem)
        except ds.AnnotationError as exc:
            failures.append((xml.name, str(exc)))
            continue
        (out / f"{xml.stem}.txt").write_text(ds.to_yolo_txt(ann))
        counts.update(o.name for o in ann.objects)
    print("  ".join(f"{name}: {counts[name]}" for name in CLASS_NAMES))
    for name, msg in failures:
        print(f"error: {name}: {msg}", file=sys.stderr)
    return EXIT_INPUT if failures else EXIT_OK


def cmd_augment(args):
    corpus = _load_corpus(args.images, args.labels)
    expanded = ds.expand_dataset(corpus, args.target_total, args.seed)
    img_dir, lbl_dir = Path(args.out) / "images", Path(args.out) / "labels"
    img_dir.mkdir(parents=True, exist_ok=True)
    lbl_dir.mkdir(parents=True, exist_ok=True)
    for s in expanded:
        (img_dir / f"{s.image_id}.ppm").write_bytes(ds.write_ppm(s.image))
        (lbl_dir / f"{s.image_id}.txt").write_text(ds.to_yolo_txt(s.annotation))
    print(f"{len(expanded)} items ({len(expanded) - len(corpus)} augmented)")
    return EXIT_OK


def cmd_split(args):
    root = Path(args.dir)
    stems = sorted(p.stem for p in (root / "images").glob("*.ppm"))
    if not stems:
        stems = sorted(p.stem for p in (root / "labels").glob("*.txt"))
    train, test = ds.split(stems, args.ratio, args.seed)
    (root / "train.txt").write_text("".join(f"{s}\n" for s in train))
    (root / "test.txt").write_text("".join(f"{s}\n" for s in test))
    print(f"train {len(train)}  test {len(test)}")
    return EXIT_OK


def cmd_init(args):
    m = init_weights(build_model(_spec(args)), args.seed)
    save_weights(m, args.out)
    print(f"wrote {len(m.manifest)} tensors to {args.out}")
    return EXIT_OK


def cmd_infer(args):
    m = _load_model(args)
    if not os.path.isfile(args.image):
        raise InputError(f"image not found: {args.image}")
    dets = detect_image(m, _read_image(args.image), args.conf, args.iou)
    text = format_detections(dets)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args):
    img_paths = sorted(Path(args.images).glob("*.ppm"))
    model = None if args.detections else _load_model(args)
    preds, gts = [], []
    for p in img_paths:
        img = _read_image(p)
        lbl = Path(args.labels) / f"{p.stem}.txt"
        ann = ds.from_yolo_txt(lbl.read_text() if lbl.exists() else "", img.width, img.height, p.stem)
        gts.append(ds.ground_truths(ann))
        if args.detections:
            dump = Path(args.detections) / f"{p.stem}.txt"
            preds.append(parse_detections(dump.read_text()) if dump.exists() else [])
        else:
            preds.append(detect_image(model, img, args.conf, args.nms_iou))
    report = evaluate(preds, gts, nc=args.nc, iou_thresh=args.iou)
    params = flops = None
    if model is not None:
        params, flops = count_params(model), count_flops(model)
    sys.stdout.write(format_summary(report, params, flops))
    if args.pr_out:
        export_pr_curve(report, args.pr_out)
    return EXIT_OK


def cmd_count(args):
    m = build_model(_spec(args))
    params = count_params(m)
    running = count_running_stats(m)
    flops = count_flops(m)
    print(f"params      {params} ({params / 1e6:.2f}M)  reference {REFERENCE_PARAMS_M}M")
    print(f"bn running  {running}")
    print(f"flops       {flops} ({flops / 1e9:.2f}G) at {args.input_size}x{args.input_size}  reference {REFERENCE_FLOPS_G}G")
    return EXIT_OK


def cmd_bench(args):
    m = _load_model(args)
    res = bench_fps(m, iterations=args.n)
    print(f"{res.mean_ms:.3f} ms/image  {res.fps:.2f} FPS  (min {res.min_ms:.3f} ms)")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="lwdet", description="Wood panel defect detector toolkit.")
    sp = p.add_subparsers(dest="command", required=True)

    def model_flags(q):
        q.add_argument("--input-size", type=int, default=640)
        q.add_argument("--nc", type=int, default=len(CLASS_NAMES))

    q = sp.add_parser("convert", help="VOC XML directory -> YOLO txt labels")
    q.add_argument("--voc-dir", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_convert)

    q = sp.add_parser("augment", help="expand a corpus with flip / brightness-contrast copies")
    q.add_argument("--images", required=True)
    q.add_argument("--labels", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=_seed, default=0)
    q.add_argument("--target-total", type=int, required=True)
    q.set_defaults(func=cmd_augment)

    q = sp.add_parser("split", help="write train.txt / test.txt manifests")
    q.add_argument("--dir", required=True)
    q.add_argument("--ratio", type=_threshold("ratio"), default=0.9)
    q.add_argument("--seed", type=_seed, default=0)
    q.set_defaults(func=cmd_split)

    q = sp.add_parser("init", help="write seeded initial weights")
    q.add_argument("--seed", type=_seed, default=0)
    q.add_argument("--out", required=True)
    model_flags(q)
    q.set_defaults(func=cmd_init)

    q = sp.add_parser("infer", help="detect defects in one PPM image")
    q.add_argument("--weights", required=True)
    q.add_argument("--image", required=True)
    q.add_argument("--conf", type=_threshold("conf"), default=DEFAULT_CONF)
    q.add_argument("--iou", type=_threshold("iou"), default=DEFAULT_NMS_IOU)
    q.add_argument("--out")
    model_flags(q)
    q.set_defaults(func=cmd_infer)

    q = sp.add_parser("eval", help="AP / mAP over an image + label corpus")
    q.add_argument("--weights")
    q.add_argument("--images", required=True)
    q.add_argument("--labels", required=True)
    q.add_argument("--iou", type=_threshold("iou"), default=EVAL_IOU)
    q.add_argument("--conf", type=_threshold("conf"), default=0.001)
    q.add_argument("--nms-iou", type=_threshold("nms-iou"), default=DEFAULT_NMS_IOU)
    q.add_argument("--pr-out")
    q.add_argument("--detections", help="directory of detection dumps to score instead of running the model")
    model_flags(q)
    q.set_defaults(func=cmd_eval)

    q = sp.add_parser("count", help="parameter and FLOP counts")
    model_flags(q)
    q.set_defaults(func=cmd_count)

    q = sp.add_parser("bench", help="forward-pass throughput")
    q.add_argument("--weights", required=True)
    q.add_argument("--n", type=int, default=10)
    model_flags(q)
    q.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    if args.command == "eval" and not args.detections and not args.weights:
        print("error: eval needs --weights or --detections", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # invariant violations
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
