"""Run a model over suite benchmarks and collect every applicable metric."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .benchgen.suite import BENCHMARKS, CATEGORIES, FLIP_BENCHMARKS, BenchmarkSuite
from .errors import ContractError
from .model import ModelConfig, ModelParams, predict_batches

BENCHMARK_ORDER = tuple(BENCHMARKS)
ROBUST_BENCHMARKS = tuple(b for b in BENCHMARK_ORDER if BENCHMARKS[b] != "base")
SPLITS = ("eval", "all", *CATEGORIES, "base", *BENCHMARK_ORDER)


def benchmarks_for_split(split: str) -> list[str]:
    if split in ("eval", "all"):
        return list(BENCHMARK_ORDER)
    if split in BENCHMARKS:
        return [split]
    chosen = [b for b in BENCHMARK_ORDER if BENCHMARKS[b] == split]
    if not chosen:
        raise ContractError(f"unknown split {split!r}; expected one of {', '.join(SPLITS)}")
    return chosen


def predictions_for(suite: BenchmarkSuite, questions, predicted: np.ndarray) -> list[M.Prediction]:
    out = []
    for q, idx in zip(questions, predicted):
        answer = suite.answers[int(idx)]
        out.append(
            M.Prediction(
                question_id=q.question_id,
                answer=answer,
                correct=M.is_correct({q.answer: 1.0}, answer),
                gold=q.answer,
                group_id=q.group_id,
                main_id=q.main_id,
                source_id=q.source_id,
                role=q.role,
                ood_tag=q.ood_tag,
            )
        )
    return out


def benchmark_metrics(name: str, preds: list[M.Prediction]) -> tuple[dict, float]:
    """Metric dict for one benchmark and the single score fed to Meta-Ave."""
    if name == "vqa_rep":
        smallest = min(sum(1 for p in preds if p.group_id == g) for g in {p.group_id for p in preds})
        out = {"accuracy": M.accuracy(preds)}
        for k in range(1, min(4, smallest) + 1):
            out[f"CS({k})"] = M.consensus_score(preds, k)
        return out, out["accuracy"]
    if name in ("iv", "cv"):
        expect = "decrement" if name == "cv" else "same"
        out = M.flips_decomposition(M.link_pairs(preds), expect=expect)
        out["accuracy"] = M.accuracy(preds)
        return out, out["flips"]
    if name == "introspect":
        out = M.consistency_quadrants(M.main_sub_pairs(preds))
        mains = [p for p in preds if p.role == "main"]
        out["main_question_acc"] = M.accuracy(mains)
        return out, out["MS"]
    if name == "gqa_ood":
        out = M.ood_delta(preds)
        return out, out["all"]
    out = {"accuracy": M.accuracy(preds)}
    return out, out["accuracy"]


@dataclass
class MetricReport:
    metrics: dict[str, dict]
    scores: dict[str, float]
    seed: int | None = None
    suite_hash: str | None = None
    label: str = ""

    @property
    def flip_flags(self) -> dict[str, bool]:
        return {b: b in FLIP_BENCHMARKS for b in self.scores}

    def meta_average(self, names=None) -> float | None:
        names = [b for b in (names or BENCHMARK_ORDER) if b in self.scores]
        if not names:
            return None
        return M.meta_average([self.scores[b] for b in names], [b in FLIP_BENCHMARKS for b in names])

    def category_scores(self) -> dict[str, float | None]:
        return {c: self.meta_average([b for b in ROBUST_BENCHMARKS if BENCHMARKS[b] == c]) for c in CATEGORIES}

    def polygon(self) -> dict[str, float]:
        out = {}
        for b, v in self.scores.items():
            if b in ("lol_comp", "lol_supp"):
                continue
            out[b] = M.polygon_score(b, v)
        if "lol_comp" in self.scores and "lol_supp" in self.scores:
            out["vqa_lol"] = M.polygon_score("vqa_lol", (self.scores["lol_comp"], self.scores["lol_supp"]))
        return out

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "seed": self.seed,
            "suite_hash": self.suite_hash,
            "metrics": self.metrics,
            "scores": self.scores,
            "flip_flags": self.flip_flags,
            "meta_ave": self.meta_average(),
            "meta_ave_robust": self.meta_average(ROBUST_BENCHMARKS),
            "category_scores": self.category_scores(),
            "polygon": self.polygon(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def csv_row(self) -> str:
        header = ["label", "seed", *BENCHMARK_ORDER, "meta_ave", "meta_ave_robust"]
        d = self.to_dict()
        row = [self.label, self.seed, *[self.scores.get(b, "") for b in BENCHMARK_ORDER], d["meta_ave"], d["meta_ave_robust"]]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerow(["" if v is None else v for v in row])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d.get("metrics", {}), d["scores"], d.get("seed"), d.get("suite_hash"), d.get("label", ""))

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate_suite(
    config: ModelConfig,
    params: ModelParams,
    suite: BenchmarkSuite,
    split: str = "eval",
    seed: int | None = None,
    label: str = "",
    predictor=None,
) -> MetricReport:
    """Metrics for every benchmark in ``split``.

    ``predictor`` (questions -> answer indices) replaces the model when given.
    """
    metrics, scores = {}, {}
    for name in benchmarks_for_split(split):
        questions = suite.benchmark(name)
        if not questions:
            continue
        if predictor is not None:
            predicted = predictor(questions)
        else:
            predicted = predict_batches(config, params, suite.encode(questions, config.L_max))
        preds = predictions_for(suite, questions, predicted)
        metrics[name], scores[name] = benchmark_metrics(name, preds)
    return MetricReport(metrics, scores, seed, suite.content_hash(), label)


def train_accuracy(config: ModelConfig, params: ModelParams, suite: BenchmarkSuite, limit: int | None = None) -> float:
    questions = suite.split("train")[:limit]
    predicted = predict_batches(config, params, suite.encode(questions, config.L_max))
    preds = predictions_for(suite, questions, predicted)
    return M.accuracy(preds)
