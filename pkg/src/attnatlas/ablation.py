"""Head- and layer-disabling sweeps with performance deltas against the
unablated baseline."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from attnatlas.encoder import NO_ABLATION, AblationSpec, Checkpoint, HeadCoord
from attnatlas.errors import DataError
from attnatlas.numerics import Rng
from attnatlas.training import evaluate


@dataclass
class AblationReport:
    kind: str  # "heads" or "layers"
    baseline_score: float
    grid: np.ndarray  # (n_layers, n_heads) for heads, (n_layers,) for layers
    metric: str
    dataset_id: str = ""
    n_evaluations: int = 0

    @property
    def deltas(self) -> np.ndarray:
        return self.grid - self.baseline_score

    def rows(self):
        """``(layer, head, score, delta)``; head is -1 for layer sweeps."""
        d = self.deltas
        if self.kind == "heads":
            for (l, h), s in np.ndenumerate(self.grid):
                yield l, h, float(s), float(d[l, h])
        else:
            for l, s in enumerate(self.grid):
                yield l, -1, float(s), float(d[l])

    def summary(self) -> dict:
        rows = list(self.rows())
        best = max(rows, key=lambda r: (r[3], -r[0], -r[1]))
        worst = min(rows, key=lambda r: (r[3], r[0], r[1]))
        return {
            "kind": self.kind,
            "metric": self.metric,
            "dataset": self.dataset_id,
            "baseline": self.baseline_score,
            "n_evaluations": self.n_evaluations,
            "best_delta": best[3],
            "best_at": [best[0], best[1]],
            "worst_delta": worst[3],
            "worst_at": [worst[0], worst[1]],
            "n_nonnegative": sum(r[3] >= 0 for r in rows),
        }

    def write(self, csv_path, json_path) -> None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "head", "score", "delta"])
            for l, h, s, d in self.rows():
                w.writerow([l, h, repr(s), repr(d)])
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _run_configs(ck, dataset, metric, configs: dict, order_seed):
    keys = list(configs)
    if order_seed is not None:
        Rng(order_seed).shuffle(keys)
    return {k: evaluate(ck, dataset, metric, configs[k]) for k in keys}


def sweep_heads(ck: Checkpoint, dataset, metric: str = "accuracy", dataset_id: str = "",
                order_seed: int | None = None) -> AblationReport:
    """Baseline plus every single-head ablation.

    ``order_seed`` shuffles the evaluation order; results are gathered by
    coordinate, so the report does not depend on it.
    """
    cfg = ck.config
    configs = {HeadCoord(l, h): AblationSpec.of([(l, h)]) for l in range(cfg.n_layers) for h in range(cfg.n_heads)}
    baseline = evaluate(ck, dataset, metric, NO_ABLATION)
    scores = _run_configs(ck, dataset, metric, configs, order_seed)
    grid = np.zeros((cfg.n_layers, cfg.n_heads))
    for c, s in scores.items():
        grid[c.layer, c.head] = s
    return AblationReport("heads", baseline, grid, metric, dataset_id, len(configs) + 1)


def sweep_layers(ck: Checkpoint, dataset, metric: str = "accuracy", dataset_id: str = "",
                 order_seed: int | None = None) -> AblationReport:
    """Baseline plus one configuration per layer with all its heads disabled."""
    cfg = ck.config
    configs = {l: AblationSpec.layer(l, cfg) for l in range(cfg.n_layers)}
    baseline = evaluate(ck, dataset, metric, NO_ABLATION)
    scores = _run_configs(ck, dataset, metric, configs, order_seed)
    grid = np.array([scores[l] for l in range(cfg.n_layers)])
    return AblationReport("layers", baseline, grid, metric, dataset_id, len(configs) + 1)


@dataclass
class RandomHeadBaseline:
    heads: list
    deltas: np.ndarray
    baseline_score: float

    @property
    def mean(self) -> float:
        return float(self.deltas.mean())

    @property
    def std(self) -> float:
        return float(self.deltas.std())


def random_head_baseline(ck: Checkpoint, dataset, metric: str = "accuracy", k: int = 10,
                         seed: int = 0) -> RandomHeadBaseline:
    """Mean and (population) standard deviation of the deltas of ``k``
    distinct single heads drawn uniformly without replacement."""
    cfg = ck.config
    total = cfg.n_total_heads
    if not 1 <= k <= total:
        raise DataError(f"k={k} outside [1, {total}]")
    picks = Rng(seed).sample_without_replacement(total, k)
    heads = [HeadCoord(i // cfg.n_heads, i % cfg.n_heads) for i in picks]
    baseline = evaluate(ck, dataset, metric, NO_ABLATION)
    deltas = np.array([evaluate(ck, dataset, metric, AblationSpec.of([c])) - baseline for c in heads])
    return RandomHeadBaseline(heads, deltas, baseline)
