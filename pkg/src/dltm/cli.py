"""Command-line entry point: ``dltm {train,eval,predict,synth,inspect}``.

Failures exit with status 2 and print exactly one line to stderr::

    error: <kind>: <message>

where ``<kind>`` is one of config, data, format, io, numeric, contract,
dimension or lock.

Evaluation reports are JSON objects with sorted keys:

    class_names, per_class_auc, macro_auc, accuracy, precision, recall, f1,
    macro_precision, macro_recall, macro_f1, counts (tp/fp/fn/tn per class),
    skipped_classes, num_records, plus checkpoint, dataset and split.

``per_class_auc`` holds null for classes with a single label value; such
classes are listed in ``skipped_classes`` and left out of the macro means.
``accuracy`` is null for multi-label tasks.

Prediction record files are JSON objects with ``signal`` (leads x samples,
millivolts) and optional ``id``, ``meta`` and ``sampling_rate_hz``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import EcgRecord, SYNTH_META_SCHEMA, load_dataset, synth_generate, write_dataset
from .errors import DataError, DltmError, FormatError
from .train import Trainer, evaluate_split, load_model, load_run_config, record_logits

SPLITS = ("train", "val", "test", "all")


def _dump(obj, sort_keys: bool = True) -> str:
    return json.dumps(obj, sort_keys=sort_keys, indent=2)


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    trainer = Trainer(run)

    def report(entry):
        auc = "n/a" if entry.val_macro_auc is None else f"{entry.val_macro_auc:.4f}"
        print(f"epoch {entry.epoch:4d}  lr {entry.lr:.6g}  train_loss {entry.train_loss:.5f}  val_auc {auc}",
              flush=True)

    trainer.fit(stop_after=args.stop_after, on_epoch=None if args.quiet else report)
    print(f"run directory: {trainer.out}")
    return 0


def _split_folds(meta: dict, split: str) -> list[int] | None:
    data = meta.get("run_config", {}).get("data", {})
    if split == "all":
        return None
    key = f"{split}_folds"
    if key not in data:
        raise FormatError(f"checkpoint metadata has no {key}")
    return data[key]


def cmd_eval(args) -> int:
    model = load_model(args.ckpt)
    dataset = load_dataset(args.data)
    folds = _split_folds(model.metadata, args.split)
    if folds is None:
        folds = sorted({e["fold"] for e in dataset.manifest.records})
    report = evaluate_split(model, dataset, folds).to_dict()
    report.update({"checkpoint": str(args.ckpt), "dataset": str(args.data), "split": args.split})
    text = _dump(report)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def read_record_file(path) -> EcgRecord:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    if not isinstance(raw, dict) or "signal" not in raw:
        raise FormatError(f"{path}: record file needs a 'signal' array")
    signal = np.asarray(raw["signal"], dtype=np.float64)
    if signal.ndim != 2:
        raise DataError(f"{path}: signal must be leads x samples, got shape {signal.shape}")
    if not np.isfinite(signal).all():
        raise DataError(f"{path}: signal has non-finite values")
    return EcgRecord(str(raw.get("id", Path(path).stem)), signal, np.zeros(0), raw.get("meta") or {},
                     sampling_rate_hz=float(raw.get("sampling_rate_hz", 100.0)))


def cmd_predict(args) -> int:
    model = load_model(args.ckpt)
    record = read_record_file(args.record)
    z = record_logits([record], model.params, model.config, model.stats)[0]
    probs = 1.0 / (1.0 + np.exp(-z))
    # class order follows the checkpoint
    print(_dump({"id": record.id, "probabilities": dict(zip(model.class_names, probs.tolist()))}, sort_keys=False))
    return 0


def cmd_synth(args) -> int:
    records, names = synth_generate(args.seed, args.records, args.classes)
    write_dataset(args.out, records, names, SYNTH_META_SCHEMA)
    print(f"wrote {len(records)} records ({', '.join(names)}) to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    model = load_model(args.ckpt)
    tensors = model.model_tensors()
    width = max(len(n) for n in tensors)
    total = 0
    for name, arr in tensors.items():
        total += arr.size
        print(f"{name:<{width}}  {'x'.join(map(str, arr.shape)) or 'scalar':>12}  {arr.size:>9}")
    extra = len(model.all_tensors) - len(tensors)
    print(f"total parameters: {total}")
    if extra:
        print(f"training-state tensors: {extra}")
    print(f"kind: {model.metadata.get('kind', 'unknown')}  epoch: {model.metadata.get('epoch', 0)}")
    print("config: " + json.dumps(model.metadata["model_config"], sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dltm", description="Lead-orthogonal ECG transformer toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train or resume a run from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--stop-after", type=int, default=None, metavar="EPOCHS",
                   help="stop once this many epochs are complete (resume later)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--out", default=None, help="also write the JSON report here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="per-class probabilities for one record file")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--record", required=True)
    r.set_defaults(func=cmd_predict)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--records", type=int, required=True)
    s.add_argument("--classes", type=int, default=4)
    s.set_defaults(func=cmd_synth)

    i = sub.add_parser("inspect", help="print tensor shapes and the parameter count")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DltmError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {exc.kind}: {msg}", file=sys.stderr)
    except OSError as exc:
        print(f"error: io: {exc}".replace("\n", " "), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
