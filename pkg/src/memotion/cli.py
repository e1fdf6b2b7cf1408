"""``memotion`` command line: preprocess, vocab, train, evaluate, predict, gradcheck, synth.

Exit codes: 0 success, 2 data error, 3 numerical abort, 4 checkpoint error,
1 anything else. Log verbosity comes from ``MEMOTION_LOG_LEVEL`` (default
WARNING).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig, format_run_config, load_run_config
from .dataio.images import load_image, write_ppm
from .dataio.labels import COLUMNS, TASKS, canonical_names, parse_label_file
from .dataio.records import iter_records, read_records, write_records
from .dataio.sample import MemeSample
from .dataio.synthetic import generate_synthetic_dataset
from .dataio.tokenizer import Vocabulary, build_vocab, tokenize
from .errors import CheckpointError, ConfigError, DataError, FormatError, InputError, NumericalError, ParseError
from .fusion import MemeModel, normalize_variant
from .gradcheck import run_suite
from .metrics import competition_scores, per_head_macro_f1, predict_labels
from .optim import label_histograms
from .training import split_train_validation, train_two_phase

log = logging.getLogger("memotion")

EXIT_OK, EXIT_OTHER, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 1, 2, 3, 4
IMAGE_SUFFIXES = (".ppm", ".pgm")


def _configure_logging():
    level = os.environ.get("MEMOTION_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _run_config(args, **overrides) -> RunConfig:
    items = list(getattr(args, "set", None) or [])
    items += [f"{k}={v}" for k, v in overrides.items() if v is not None]
    return load_run_config(getattr(args, "config", None), items)


def _resolve_image(images_dir: Path, name: str) -> Path:
    """The named file, or a converted ``.ppm``/``.pgm`` sibling with the same stem."""
    path = images_dir / name
    if path.suffix.lower() in IMAGE_SUFFIXES:
        return path
    for suffix in IMAGE_SUFFIXES:
        candidate = path.with_suffix(suffix)
        if candidate.exists():
            return candidate
    return path


def _histogram_lines(samples) -> list[str]:
    hist = label_histograms([s.labels for s in samples])
    return [f"histogram.{task}\t{' '.join(str(int(c)) for c in hist[task])}" for task in TASKS]


# --- commands ----------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    rows = parse_label_file(args.labels)
    vocab = Vocabulary.load(args.vocab)
    images_dir = Path(args.images)
    samples, truncated = [], 0
    for name, text, labels in rows:
        image = load_image(_resolve_image(images_dir, name), args.resolution, args.pixel_mean)
        encoded = tokenize(text, vocab, args.seq_len)
        truncated += encoded.truncated
        samples.append(MemeSample(Path(name).stem, image, encoded, labels))
    count = write_records(args.out, samples)
    print(f"samples\t{count}")
    print(f"truncated_texts\t{truncated}")
    for line in _histogram_lines(samples):
        print(line)
    return EXIT_OK


def cmd_vocab(args) -> int:
    if args.labels:
        corpus = [text for _, text, _ in parse_label_file(args.labels)]
    else:
        corpus = Path(args.text).read_text(encoding="utf-8").splitlines()
    vocab = build_vocab(corpus, args.size)
    vocab.save(args.out)
    print(f"vocabulary\t{len(vocab)}")
    return EXIT_OK


def _check_compatible(model_config, samples, where: str):
    """Records must carry what the variant needs, at the sizes the model expects."""
    if not samples:
        raise InputError(f"{where}: no samples")
    first = samples[0]
    if model_config.uses_image:
        if first.image is None:
            raise InputError(f"{where}: records have no images but the {model_config.variant} model needs them")
        r = model_config.image.input_resolution
        if first.image.shape != (3, r, r):
            raise InputError(f"{where}: images are {first.image.shape}, model expects (3, {r}, {r})")
    if model_config.uses_text:
        if first.text is None:
            raise InputError(f"{where}: records have no text but the {model_config.variant} model needs it")
        if len(first.text) != model_config.text.max_seq_len:
            raise InputError(
                f"{where}: token sequences have length {len(first.text)}, model expects {model_config.text.max_seq_len}"
            )
        top = max(int(s.text.input_ids.max()) for s in samples)
        if top >= model_config.text.vocab_size:
            raise InputError(f"{where}: token id {top} exceeds the model vocabulary size {model_config.text.vocab_size}")


def _table2_lines(variant: str, f1: dict[str, float]) -> list[str]:
    header = f"{'architecture':<14}" + "".join(f"{t:>12}" for t in TASKS)
    return [header, f"{variant:<14}" + "".join(f"{f1[t]:>12.4f}" for t in TASKS)]


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.variant:
        cfg.model.variant = normalize_variant(args.variant)
        cfg.validate()
    samples = read_records(args.records)
    _check_compatible(cfg.model, samples, args.records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(format_run_config(cfg), encoding="utf-8")

    train, val = split_train_validation(samples, cfg.training.validation_fraction, cfg.training.seed)
    model = MemeModel(cfg.model)
    if args.init_from:
        ckpt.import_weights(model, args.init_from, components=tuple(args.init_components.split(",")))
    result = train_two_phase(model, train, val, cfg.training, out_dir=out, resume_from=args.resume)

    pred, gold = predict_labels(model, val)
    f1 = per_head_macro_f1(pred, gold)
    report = competition_scores(pred, gold)
    lines = [f"best_metric\t{result.best_metric:.6f}", f"best_epoch\t{result.state.best_epoch}"]
    lines += [f"val.{t}\t{f1[t]:.6f}" for t in TASKS] + report.as_lines()
    (out / "metrics.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(_table2_lines(cfg.model.variant, f1)))
    print()
    print(report.table())
    return EXIT_OK


def _load_for_inference(args) -> MemeModel:
    expected = None
    if getattr(args, "config", None):
        expected = _run_config(args).model
    return ckpt.load_model(args.checkpoint, expected)


def read_predictions(path) -> dict[str, tuple[int, ...]]:
    """``id -> fine codes`` from a prediction file written by ``predict``."""
    names = canonical_names()
    codes = {task: {n: i for i, n in enumerate(names[task])} for task in TASKS}
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != ["id", *TASKS]:
            raise FormatError(f"{path}: expected header id\t{chr(9).join(TASKS)}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 1 + len(TASKS):
                raise ParseError(f"{path}: expected {1 + len(TASKS)} fields", row=row_no)
            try:
                out[row[0]] = tuple(codes[t][v] for t, v in zip(TASKS, row[1:]))
            except KeyError as exc:
                raise ParseError(f"{path}: unknown class name {exc.args[0]!r}", row=row_no) from None
    return out


def write_predictions(path, ids, pred):
    names = canonical_names()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["id", *TASKS])
        for sample_id, row in zip(ids, np.asarray(pred).tolist()):
            writer.writerow([sample_id, *(names[t][c] for t, c in zip(TASKS, row))])


def cmd_evaluate(args) -> int:
    samples = read_records(args.records)
    gold = np.array([s.labels.as_tuple() for s in samples], dtype=np.int64)
    if args.predictions:
        predicted = read_predictions(args.predictions)
        missing = [s.id for s in samples if s.id not in predicted]
        if missing:
            raise InputError(f"{args.predictions}: no prediction for {len(missing)} sample(s), e.g. {missing[:3]}")
        pred = np.array([predicted[s.id] for s in samples], dtype=np.int64)
    else:
        model = _load_for_inference(args)
        _check_compatible(model.config, samples, args.records)
        pred, gold = predict_labels(model, samples)
    report = competition_scores(pred, gold)
    print(report.table())
    print()
    print("\n".join(report.as_lines()))
    return EXIT_OK


def cmd_predict(args) -> int:
    samples = read_records(args.records)
    model = _load_for_inference(args)
    _check_compatible(model.config, samples, args.records)
    pred, _ = predict_labels(model, samples)
    write_predictions(args.out, [s.id for s in samples], pred)
    print(f"predictions\t{len(samples)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _run_config(args)
    report = run_suite(cases=args.cases, seed=args.seed, model_config=cfg.model, include_model=not args.no_model)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_OTHER


def write_label_file(path, names: list[str], texts: list[str], samples: list[MemeSample]):
    label_names = canonical_names()
    columns = ["image_name", "text", *COLUMNS]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(columns)
        for name, text, sample in zip(names, texts, samples):
            row = [name, text]
            row += [label_names[task][getattr(sample.labels, task)] for task in COLUMNS.values()]
            writer.writerow(row)


def cmd_synth(args) -> int:
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    ds = generate_synthetic_dataset(args.n, args.seed, args.resolution, args.seq_len)
    write_records(out / "records.mem1", ds.samples)
    ds.vocab.save(out / "vocab.txt")
    names = [f"{s.id}.ppm" for s in ds.samples]
    for name, rgb in zip(names, ds.images_rgb):
        write_ppm(out / "images" / name, np.round(rgb * 255))
    write_label_file(out / "labels.tsv", names, ds.texts, ds.samples)
    print(f"samples\t{len(ds.samples)}")
    for line in _histogram_lines(ds.samples):
        print(line)
    return EXIT_OK


def cmd_config(args) -> int:
    print(format_run_config(_run_config(args)), end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    count = 0
    for sample in iter_records(args.records):
        count += 1
    print(f"samples\t{count}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memotion", description="Multimodal multi-task meme classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=False):
        p.add_argument("--config", required=required, help="run configuration file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")

    p = sub.add_parser("preprocess", help="label file + images -> record file")
    p.add_argument("--labels", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--pixel-mean", type=float, default=0.5)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("vocab", help="build a subword vocabulary")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--labels", help="label file whose text column is the corpus")
    src.add_argument("--text", help="plain-text corpus, one document per line")
    p.add_argument("--size", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("train", help="two-phase training")
    with_config(p)
    p.add_argument("--records", required=True)
    p.add_argument("--variant", choices=["text", "image", "multimodal"])
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.add_argument("--init-from", help="import encoder weights from another checkpoint")
    p.add_argument("--init-components", default="text,image")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="competition scores (Subtasks A, B, C)")
    with_config(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="prediction file written by 'predict'")
    p.add_argument("--records", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write per-sample predicted class names")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    with_config(p)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-model", action="store_true", help="skip the whole-model check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset (records, vocab, label file, PPM images)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("config", help="print the fully resolved configuration")
    with_config(p)
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("inspect", help="count and verify the records in a record file")
    p.add_argument("--records", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
