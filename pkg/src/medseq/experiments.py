"""End-to-end reproduction of the two synthetic-data experiments.

Experiment 1 feeds previously prescribed drug classes to every predictor;
Experiment 2 removes them. For each mode this trains the logistic-regression
baseline, the basic recurrent model, and the two-branch hierarchical model on
the combination task, the first two also on the multi-label task, and scores
the previous-prescription baseline, reporting test accuracy and macro AUC.

Run directly:  python -m medseq.experiments --seeds 1 2 3 --patients 2000
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Optional

from .dataset import PreparedDataset, prepare_dataset
from .ehr import ingest_events
from .metrics import evaluate
from .models import PrevPredictor
from .preprocess import MODE_WITH_PREV, MODE_WITHOUT_PREV
from .synthdata import BayesReport, GenConfig, bayes_rate, generate
from .train import TrainConfig, train_model

logger = logging.getLogger(__name__)


@dataclass
class ExperimentSettings:
    n_patients: int = 2000
    seed: int = 1
    epochs: dict = field(default_factory=lambda: {"lr": 60, "rnn": 14, "hrnn2": 6})
    learning_rates: dict = field(default_factory=lambda: {"lr": 1e-2, "rnn": 3e-3,
                                                          "hrnn2": 5e-3})
    batch: int = 32
    hidden: int = 64
    precision: int = 32
    k_icd: int = 350
    keep_events: Optional[str] = None  # directory for events.csv; tmp when None
    compute_bayes: bool = True


def _train_eval(ds: PreparedDataset, kind: str, task: str,
                settings: ExperimentSettings) -> dict:
    spec = ds.model_spec(kind, task, hidden=settings.hidden, seed=settings.seed)
    config = TrainConfig(epochs=settings.epochs[kind], batch_size=settings.batch,
                         lr=settings.learning_rates[kind], seed=settings.seed,
                         precision=settings.precision)
    started = time.monotonic()
    ckpt, log = train_model(spec, ds.cases("train"), ds.cases("validation"),
                            config, ds.fingerprint())
    report = evaluate(ckpt.to_model(), ds.cases("test"), task, "test")
    elapsed = time.monotonic() - started
    logger.info("%s %s/%s: %.1fs", ds.mode, kind, task, elapsed)
    out = {"report": report.to_dict(), "train_seconds": elapsed,
           "best_epoch": log.best_epoch}
    if task == "dcc":
        out["accuracy"] = report.metrics["average"]["accuracy"]
    else:
        out["macro_auc"] = report.metrics["macro_auc"]
    return out


def run_mode(ds: PreparedDataset, settings: ExperimentSettings) -> dict:
    results: dict = {"mode": ds.mode}
    if ds.mode == MODE_WITH_PREV:
        prev = PrevPredictor(ds.combo_vocab)
        acc_report = evaluate(prev, ds.cases("test"), "dcc", "test")
        auc_report = evaluate(prev, ds.cases("test"), "dc", "test")
        results["prev"] = {
            "accuracy": acc_report.metrics["average"]["accuracy"],
            "macro_auc": auc_report.metrics["macro_auc"],
            "report": acc_report.to_dict(),
        }
    for kind in ("lr", "rnn", "hrnn2"):
        results[f"{kind}_dcc"] = _train_eval(ds, kind, "dcc", settings)
    for kind in ("lr", "rnn"):
        results[f"{kind}_dc"] = _train_eval(ds, kind, "dc", settings)
    return results


def run_seed(settings: ExperimentSettings) -> dict:
    """Generate, preprocess, and run both experiments for one seed."""
    started = time.monotonic()
    gen = GenConfig(n_patients=settings.n_patients, seed=settings.seed)
    tmp = None
    if settings.keep_events is None:
        tmp = tempfile.TemporaryDirectory(prefix="medseq-exp-")
        events_dir = tmp.name
    else:
        os.makedirs(settings.keep_events, exist_ok=True)
        events_dir = settings.keep_events
    try:
        events_path = os.path.join(events_dir, f"events_seed{settings.seed}.csv")
        truth = generate(gen, events_path, keep_patients=False)
        ingest = ingest_events(events_path)
        ds1 = prepare_dataset(ingest.timelines, MODE_WITH_PREV,
                              k_icd=settings.k_icd, split_seed=settings.seed)
        results = {
            "seed": settings.seed,
            "n_patients": settings.n_patients,
            "stay_rate": truth.stay_rate,
            "settings": {"epochs": settings.epochs, "batch": settings.batch,
                         "learning_rates": settings.learning_rates,
                         "hidden": settings.hidden,
                         "precision": settings.precision},
        }
        results["experiment1"] = run_mode(ds1, settings)
        ds2 = ds1.with_mode(MODE_WITHOUT_PREV)
        ds1._steps.clear()
        ds1._cases.clear()
        results["experiment2"] = run_mode(ds2, settings)
        if settings.compute_bayes:
            bayes: BayesReport = bayes_rate(gen)
            results["bayes"] = bayes.to_dict()
        results["wall_clock_sec"] = time.monotonic() - started
        return results
    finally:
        if tmp is not None:
            tmp.cleanup()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    parser.add_argument("--patients", type=int, default=2000)
    parser.add_argument("--precision", type=int, default=32, choices=(32, 64))
    parser.add_argument("--out", help="write one JSON result file per seed")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    for seed in args.seeds:
        settings = ExperimentSettings(n_patients=args.patients, seed=seed,
                                      precision=args.precision)
        results = run_seed(settings)
        summary = _summarize(results)
        print(json.dumps(summary, indent=1, sort_keys=True))
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            path = os.path.join(args.out, f"experiments_seed{seed}.json")
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(results, fh, indent=1, sort_keys=True)
                fh.write("\n")
    return 0


def _summarize(results: dict) -> dict:
    e1, e2 = results["experiment1"], results["experiment2"]
    return {
        "seed": results["seed"],
        "exp1_accuracy": {
            "prev": e1["prev"]["accuracy"],
            "lr": e1["lr_dcc"]["accuracy"],
            "rnn": e1["rnn_dcc"]["accuracy"],
            "hrnn2": e1["hrnn2_dcc"]["accuracy"],
        },
        "exp1_macro_auc": {"lr": e1["lr_dc"]["macro_auc"],
                           "rnn": e1["rnn_dc"]["macro_auc"],
                           "prev": e1["prev"]["macro_auc"]},
        "exp2_accuracy": {"lr": e2["lr_dcc"]["accuracy"],
                          "rnn": e2["rnn_dcc"]["accuracy"],
                          "hrnn2": e2["hrnn2_dcc"]["accuracy"]},
        "exp2_macro_auc": {"lr": e2["lr_dc"]["macro_auc"],
                           "rnn": e2["rnn_dc"]["macro_auc"]},
        "bayes": results.get("bayes"),
        "wall_clock_sec": results["wall_clock_sec"],
    }


if __name__ == "__main__":
    raise SystemExit(main())
