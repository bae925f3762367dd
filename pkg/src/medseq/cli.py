"""Command-line entry point: synth | preprocess | train | eval | predict.

Every command takes ``--config FILE`` (flat ``key=value`` lines, '#' comments)
whose values act as flag defaults; explicit flags win. Outputs land in the
``--out`` run directory together with a manifest.json echoing the effective
configuration. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .dataset import (
    DatasetError,
    dataset_case_counts,
    export_jsonl,
    load_dataset,
    prepare_dataset,
    save_dataset,
)
from .ehr import DRUG_CLASS_NAMES, IngestError, combo_names, ingest_events
from .metrics import evaluate
from .models import (
    CheckpointError,
    PrevPredictor,
    load_checkpoint,
    save_checkpoint,
)
from .preprocess import AggSpec, EmptyCohortError, MODES, build_pending_case
from .synthdata import GenConfig, generate
from .train import TrainConfig, TrainDivergence, train_model

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class ConfigError(RuntimeError):
    pass


# every key a config file may set, mapped to the flag destination it feeds
CONFIG_KEYS = {
    "patients": ("patients", int),
    "seed": ("seed", int),
    "k_icd": ("k_icd", int),
    "l_outer": ("l_outer", int),
    "l_inner": ("l_inner", int),
    "hidden": ("hidden", int),
    "batch": ("batch", int),
    "epochs": ("epochs", int),
    "dropout": ("dropout", float),
    "lr": ("lr", float),
    "optimizer": ("optimizer", str),
    "precision": ("precision", int),
    "clip_norm": ("clip_norm", float),
    "mode": ("mode", str),
    "agg_icd": ("agg_icd", str),
    "agg_meas": ("agg_meas", str),
    "split": ("split", str),
    "min_med_len": ("min_med_len", int),
    "p_stay": ("p_stay", float),
    "p_meas": ("p_meas", float),
    "stay_swing": ("stay_swing", float),
    "p_eligible": ("p_eligible", float),
}


def parse_config_file(path: str) -> dict:
    values = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    with fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
            dest, cast = CONFIG_KEYS[key]
            try:
                values[dest] = cast(value)
            except ValueError as exc:
                raise ConfigError(f"{path}:{line_no}: bad value for {key}: {exc}")
    return values


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"split must be three comma-separated ratios, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _write_manifest(out: str, command: str, config: dict,
                    artifacts: Sequence[str]) -> None:
    manifest = {
        "tool": "medseq",
        "version": __version__,
        "command": command,
        "config": config,
        "artifacts": sorted(artifacts),
    }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _effective(args: argparse.Namespace, names: Sequence[str]) -> dict:
    return {name: getattr(args, name) for name in names if hasattr(args, name)}


def cmd_synth(args: argparse.Namespace) -> int:
    out = _ensure_out(args.out)
    cfg = GenConfig(n_patients=args.patients, seed=args.seed, p_stay=args.p_stay,
                    p_meas=args.p_meas, stay_swing=args.stay_swing,
                    p_eligible=args.p_eligible)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    events_path = os.path.join(out, "events.csv")
    truth = generate(cfg, events_path)
    truth_path = os.path.join(out, "truth.json")
    with open(truth_path, "w", encoding="utf-8") as fh:
        fh.write(truth.to_json())
        fh.write("\n")
    config = _effective(args, ["patients", "seed", "p_stay", "p_meas",
                               "stay_swing", "p_eligible"])
    _write_manifest(out, "synth", config, ["events.csv", "truth.json"])
    print(f"wrote {events_path}: {truth.n_patients} patients "
          f"({truth.n_eligible} cohort-eligible), "
          f"stay rate {truth.stay_rate:.4f}")
    return EXIT_OK


def cmd_preprocess(args: argparse.Namespace) -> int:
    out = _ensure_out(args.out)
    if args.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {args.mode!r}")
    result = ingest_events(args.events)
    agg = AggSpec(icd=args.agg_icd, meas=args.agg_meas)
    ds = prepare_dataset(
        result.timelines, args.mode, k_icd=args.k_icd, l_outer=args.l_outer,
        l_inner=args.l_inner, agg=agg, ratios=_parse_ratios(args.split),
        split_seed=args.seed, min_med_len=args.min_med_len,
        config_echo={"events": os.path.abspath(args.events)})
    dataset_path = os.path.join(out, "dataset.mds")
    save_dataset(ds, dataset_path)
    ds.icd_vocab.save(os.path.join(out, "vocab_icd.txt"))
    ds.meas_vocab.save(os.path.join(out, "vocab_meas.txt"))
    ds.combo_vocab.save(os.path.join(out, "vocab_combos.txt"))
    artifacts = ["dataset.mds", "vocab_icd.txt", "vocab_meas.txt",
                 "vocab_combos.txt"]
    if args.jsonl:
        n = export_jsonl(ds, os.path.join(out, "cases.jsonl"))
        artifacts.append("cases.jsonl")
        print(f"exported {n} cases to cases.jsonl")
    config = _effective(args, ["events", "mode", "k_icd", "l_outer", "l_inner",
                               "agg_icd", "agg_meas", "split", "seed",
                               "min_med_len"])
    _write_manifest(out, "preprocess", config, artifacts)
    _print_corpus_stats(ds)
    return EXIT_OK


def _print_corpus_stats(ds) -> None:
    counts = dataset_case_counts(ds)
    stats = ds.stats
    print(f"cohort patients: {sum(len(ds.split.of(s)) for s in ('train', 'validation', 'test'))} "
          f"(train {len(ds.split.train)}, val {len(ds.split.validation)}, "
          f"test {len(ds.split.test)})")
    print(f"cases: train {counts['train']}, val {counts['validation']}, "
          f"test {counts['test']}")
    pd = stats["patient_days"]
    print(f"patient-days: diagnosis {pd['diagnosis']}, medication {pd['medication']}, "
          f"measurement {pd['measurement']}")
    pers = stats["persistence"]
    denom = pers["stay"] + pers["change"]
    rate = pers["stay"] / denom if denom else 0.0
    print(f"persistence: {pers['stay']}/{denom} = {rate:.4f} "
          f"(heads {pers['head']}, total {pers['total']})")
    print(f"{'class':<16}{'count':>8}{'ratio':>8}")
    for name in DRUG_CLASS_NAMES:
        print(f"{name:<16}{stats['class_counts'][name]:>8}"
              f"{stats['class_ratios'][name]:>8.4f}")
    print(f"vocab: {len(ds.icd_vocab)} diagnosis codes, {len(ds.meas_vocab)} "
          f"measurement channels, {len(ds.combo_vocab)} drug combinations")


def cmd_train(args: argparse.Namespace) -> int:
    out = _ensure_out(args.out)
    ds = load_dataset(args.dataset)
    if args.model == "prev":
        raise ConfigError("the Prev. baseline has no trainable parameters; "
                          "evaluate it directly with `medseq eval --model prev`")
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch,
                         optimizer=args.optimizer, lr=args.lr, seed=args.seed,
                         precision=args.precision, clip_norm=args.clip_norm)
    spec = ds.model_spec(args.model, args.task, hidden=args.hidden,
                         seed=args.seed)
    ckpt, log = train_model(spec, ds.cases("train"), ds.cases("validation"),
                            config, ds.fingerprint())
    ckpt_path = os.path.join(out, "model.mck")
    save_checkpoint(ckpt, ckpt_path)
    with open(os.path.join(out, "train_log.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(log.to_jsonl())
    cfg = _effective(args, ["dataset", "model", "task", "epochs", "batch", "lr",
                            "optimizer", "hidden", "seed", "precision",
                            "clip_norm"])
    _write_manifest(out, "train", cfg, ["model.mck", "train_log.jsonl"])
    best = log.epochs[log.best_epoch]
    print(f"trained {args.model}/{args.task}: best epoch {log.best_epoch} "
          f"(val loss {best.val_loss:.4f}, val metric {best.val_metric:.4f}); "
          f"wrote {ckpt_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    out = _ensure_out(args.out)
    ds = load_dataset(args.dataset)
    lineage = {"dataset": os.path.abspath(args.dataset),
               "fingerprint": ds.fingerprint(), "config": ds.config_echo}
    if args.model == "prev":
        if ds.mode != "with_prev":
            raise ConfigError("the Prev. baseline needs a with_prev dataset")
        predictor = PrevPredictor(ds.combo_vocab)
        task = args.task
        if task is None:
            raise ConfigError("--task is required with --model prev")
    else:
        if not args.ckpt:
            raise ConfigError("either --ckpt or --model prev is required")
        ckpt = load_checkpoint(args.ckpt, expect_fingerprint=ds.fingerprint())
        if ckpt.spec.mode != ds.mode:
            raise CheckpointError(
                f"checkpoint mode {ckpt.spec.mode} vs dataset mode {ds.mode}")
        predictor = ckpt.to_model()
        task = ckpt.spec.task
        lineage["checkpoint"] = os.path.abspath(args.ckpt)
        lineage["train_meta"] = ckpt.train_meta
    report = evaluate(predictor, ds.cases(args.split), task, args.split, lineage)
    with open(os.path.join(out, "report.json"), "wb") as fh:
        fh.write(report.to_json_bytes())
        fh.write(b"\n")
    table = report.text_table()
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    cfg = _effective(args, ["dataset", "ckpt", "model", "task", "split"])
    _write_manifest(out, "eval", cfg, ["report.json", "report.txt"])
    print(table, end="")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    ds = load_dataset(args.dataset)
    ckpt = load_checkpoint(args.ckpt, expect_fingerprint=ds.fingerprint())
    if ckpt.spec.mode != ds.mode:
        raise CheckpointError(f"checkpoint mode {ckpt.spec.mode} vs dataset "
                              f"mode {ds.mode}")
    model = ckpt.to_model()
    result = ingest_events(args.events)
    if args.patient:
        matches = [tl for tl in result.timelines if tl.patient_id == args.patient]
        if not matches:
            raise DatasetError(f"patient {args.patient!r} not in {args.events}")
    elif len(result.timelines) == 1:
        matches = result.timelines
    else:
        raise ConfigError("event file has multiple patients; pass --patient")
    case = build_pending_case(matches[0], ds.icd_vocab, ds.meas_vocab, ds.mode,
                              ds.l_outer, ds.l_inner, ds.agg)
    probs = model.predict_probs([case])[0]
    lines = []
    if ckpt.spec.task == "dc":
        order = np.argsort(-probs)
        for j in order:
            lines.append(f"{DRUG_CLASS_NAMES[j]:<16}{probs[j]:.4f}")
    else:
        order = np.argsort(-probs)[:args.top]
        for idx in order:
            names = "+".join(combo_names(ds.combo_vocab.decode(int(idx)))) or "-"
            lines.append(f"{names:<40}{probs[idx]:.4f}")
    output = "\n".join(lines)
    print(output)
    if args.out:
        out = _ensure_out(args.out)
        with open(os.path.join(out, "prediction.json"), "w", encoding="utf-8") as fh:
            json.dump({"patient": matches[0].patient_id,
                       "task": ckpt.spec.task,
                       "probs": [float(p) for p in probs]}, fh, sort_keys=True)
            fh.write("\n")
        _write_manifest(out, "predict",
                        _effective(args, ["dataset", "ckpt", "events",
                                          "patient", "top"]),
                        ["prediction.json"])
    return EXIT_OK


def build_parser(config_defaults: Optional[dict] = None) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medseq",
        description="Train and evaluate next-prescription sequence models on "
                    "longitudinal EHR event logs.")
    parser.add_argument("--version", action="version", version=__version__)
    subparsers = []

    class _Sub:
        """Collects subparsers so config-file values can become their defaults
        (subcommand parsing would clobber defaults set on the main parser)."""

        def __init__(self, action):
            self._action = action

        def add_parser(self, *args, **kwargs):
            p = self._action.add_parser(*args, **kwargs)
            subparsers.append(p)
            return p

    sub = _Sub(parser.add_subparsers(dest="command", required=True))

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic event log")
    common(p)
    p.add_argument("--patients", type=int, default=100)
    p.add_argument("--p-stay", dest="p_stay", type=float, default=0.645)
    p.add_argument("--p-meas", dest="p_meas", type=float, default=0.13)
    p.add_argument("--stay-swing", dest="stay_swing", type=float, default=0.30)
    p.add_argument("--p-eligible", dest="p_eligible", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="build a model-ready dataset")
    common(p)
    p.add_argument("--events", required=True)
    p.add_argument("--mode", default="with_prev", choices=MODES)
    p.add_argument("--k-icd", dest="k_icd", type=int, default=350)
    p.add_argument("--l-outer", dest="l_outer", type=int, default=20)
    p.add_argument("--l-inner", dest="l_inner", type=int, default=20)
    p.add_argument("--agg-icd", dest="agg_icd", default="max",
                   choices=("max", "count"))
    p.add_argument("--agg-meas", dest="agg_meas", default="mean",
                   choices=("mean", "max"))
    p.add_argument("--split", default="0.8,0.1,0.1")
    p.add_argument("--min-med-len", dest="min_med_len", type=int, default=10)
    p.add_argument("--jsonl", action="store_true",
                   help="also write a cases.jsonl debug export")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True,
                   choices=("lr", "rnn", "hrnn1", "hrnn2", "prev"))
    p.add_argument("--task", required=True, choices=("dc", "dcc"))
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", default="adam", choices=("adam", "sgd"))
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--precision", type=int, default=64, choices=(32, 64))
    p.add_argument("--clip-norm", dest="clip_norm", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the Prev. baseline")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--model", choices=("prev",),
                   help="evaluate the previous-prescription baseline")
    p.add_argument("--task", choices=("dc", "dcc"),
                   help="task for --model prev (checkpoints carry their own)")
    p.add_argument("--split", default="test",
                   choices=("train", "validation", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="rank medications for one patient history")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--events", required=True,
                   help="event CSV holding the patient's history")
    p.add_argument("--patient", help="patient id when the file has several")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)
    if config_defaults:
        for sp in subparsers:
            sp.set_defaults(**config_defaults)
    return parser


def _scan_config_path(argv: Sequence[str]) -> Optional[str]:
    for i, token in enumerate(argv):
        if token == "--config":
            if i + 1 >= len(argv):
                raise ConfigError("--config needs a file argument")
            return argv[i + 1]
        if token.startswith("--config="):
            return token.split("=", 1)[1]
    return None


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        # config-file values become parser defaults, so explicit flags win
        config_path = _scan_config_path(argv)
        defaults = parse_config_file(config_path) if config_path else None
        parser = build_parser(defaults)
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except TrainDivergence as exc:
        logger.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (IngestError, DatasetError, CheckpointError, EmptyCohortError,
            FileNotFoundError, ValueError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
