"""Greedy gradient-aligned selection and its baselines.

Selection scores candidates by how well their (projected) head gradients,
summed with the running selection, align with the projected weight diff at
each synthetic checkpoint. Three scoring rules are supported:

- ``dot``: static alignment, equivalent to top-k by score;
- ``cosine_sum`` (default): cosine of the running sum against each diff,
  which saturates on redundant picks and balances the batch;
- ``residual``: alignment with what is left of the diff after subtracting
  the running sum.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import TokenBatch
from .gradstore import GradientStore
from .model import TASK_CLASSIFICATION, ModelParams, _class_activations

logger = logging.getLogger(__name__)

SCORING_RULES = ("dot", "cosine_sum", "residual")
BASELINE_METHODS = ("random", "topk", "topk_balanced", "pmin", "pmax")
ALL_METHODS = ("select", "select_batch") + BASELINE_METHODS

# Squared norms this far below the operand magnitudes are cancellation
# residue: the summed vector is treated as zero (cosine undefined -> -inf).
_ZERO_SUM_REL = 1e-9


@dataclass(frozen=True)
class CheckpointSchedule:
    checkpoints: list[ModelParams]

    @property
    def count(self) -> int:
        return len(self.checkpoints)


@dataclass(frozen=True)
class SelectionResult:
    indices: list[int]
    step_scores: list[float]
    rule: str
    method: str

    def __post_init__(self):
        if len(self.indices) != len(set(self.indices)):
            raise ValueError("selected indices must be distinct")
        if len(self.step_scores) != len(self.indices):
            raise ValueError("one step score per selected index")


def synth_checkpoints(
    theta0: ModelParams, theta_f: ModelParams, num_checkpoints: int
) -> CheckpointSchedule:
    """Linear interpolations theta_hat_j = (1 - j/P) theta0 + (j/P) theta_f.

    j runs 0..P-1: the start point is included, the final model is not
    (its diff direction is identically zero).
    """
    if num_checkpoints < 1:
        raise ValueError("num_checkpoints must be at least 1")
    if not theta0.compatible_with(theta_f):
        raise ValueError("checkpoints have incompatible configs")
    blocks0 = theta0.blocks()
    blocksf = theta_f.blocks()
    out = [theta0.copy()]
    for j in range(1, num_checkpoints):
        t = j / num_checkpoints
        interp = theta0.copy()
        for name, block in interp.blocks().items():
            mixed = (
                blocks0[name].astype(np.float64) * (1.0 - t)
                + blocksf[name].astype(np.float64) * t
            )
            block[:] = mixed.astype(block.dtype)
        out.append(interp)
    return CheckpointSchedule(out)


def autolabel(batch: TokenBatch, theta_f: ModelParams) -> np.ndarray | None:
    """Pseudolabels from the final model's class posterior (ties -> lowest class).

    Next-token models use the sequence itself as target, so there is nothing
    to label and None is returned.
    """
    if theta_f.config.task != TASK_CLASSIFICATION:
        return None
    labels = np.empty(len(batch), dtype=np.int64)
    step = 512
    ids = np.asarray(batch.ids, dtype=np.int64)
    lens = np.asarray(batch.valid_len, dtype=np.int64)
    for s0 in range(0, len(batch), step):
        s1 = min(s0 + step, len(batch))
        _, _, logp = _class_activations(theta_f, ids[s0:s1], lens[s0:s1])
        labels[s0:s1] = logp.argmax(axis=1)
    return labels


class _GreedyEngine:
    """Stateful scorer for the greedy loop; streams the store per step."""

    def __init__(self, store: GradientStore, dirs: Sequence[np.ndarray], rule: str):
        if rule not in SCORING_RULES:
            raise ValueError(f"unknown scoring rule {rule!r}")
        if len(dirs) != store.num_checkpoints:
            raise ValueError(
                f"got {len(dirs)} directions for {store.num_checkpoints} checkpoints"
            )
        self.store = store
        self.rule = rule
        self.dirs = [np.asarray(d, dtype=np.float64) for d in dirs]
        for d in self.dirs:
            if d.shape != (store.k,):
                raise ValueError("direction dimension does not match store")
        n, p = store.num_examples, store.num_checkpoints
        self.static = np.zeros((p, n))
        self.sqnorm = np.zeros((p, n)) if rule == "cosine_sum" else None
        for j in range(p):
            d = self.dirs[j]
            for start, stop, block in store.iter_blocks(j):
                b64 = np.asarray(block, dtype=np.float64)
                self.static[j, start:stop] = b64 @ d
                if self.sqnorm is not None:
                    self.sqnorm[j, start:stop] = (b64 * b64).sum(axis=1)
        self.d_norm = np.array([np.linalg.norm(d) for d in self.dirs])
        self.sums = np.zeros((p, store.k))
        self.sum_sq = np.zeros(p)
        self.sum_dot_d = np.zeros(p)
        self.selected = np.zeros(n, dtype=bool)
        self.indices: list[int] = []
        self.step_scores: list[float] = []

    def _cross(self, j: int) -> np.ndarray:
        """<running sum, g_i> for every example, streamed over chunks."""
        out = np.empty(self.store.num_examples)
        s = self.sums[j]
        for start, stop, block in self.store.iter_blocks(j):
            out[start:stop] = block @ s
        return out

    def scores(self) -> np.ndarray:
        if self.rule == "dot":
            return self.static.sum(axis=0)
        total = np.zeros(self.store.num_examples)
        for j in range(self.store.num_checkpoints):
            if self.rule == "residual":
                total += self.static[j] - self._cross(j)
                continue
            if self.d_norm[j] == 0.0:
                continue  # degenerate checkpoint: no signal either way
            cross = self._cross(j)
            num = self.static[j] + self.sum_dot_d[j]
            sq = self.sum_sq[j] + 2.0 * cross + self.sqnorm[j]
            scale = self.sum_sq[j] + self.sqnorm[j]
            zero = sq <= _ZERO_SUM_REL * (scale + 1e-300)
            with np.errstate(divide="ignore", invalid="ignore"):
                term = num / (np.sqrt(np.maximum(sq, 0.0)) * self.d_norm[j])
            term[zero] = -np.inf
            total += term
        return total

    def pick(self, allowed: np.ndarray | None = None) -> tuple[int, float]:
        candidates = ~self.selected if allowed is None else (allowed & ~self.selected)
        idx = np.flatnonzero(candidates)
        if idx.size == 0:
            raise ValueError("no remaining candidates")
        scores = self.scores()[idx]
        pos = int(np.argmax(scores))
        return int(idx[pos]), float(scores[pos])

    def add(self, i: int, score: float) -> None:
        self.selected[i] = True
        self.indices.append(int(i))
        self.step_scores.append(score)
        for j in range(self.store.num_checkpoints):
            self.sums[j] += self.store.row(j, i)
            self.sum_sq[j] = float(self.sums[j] @ self.sums[j])
            self.sum_dot_d[j] = float(self.sums[j] @ self.dirs[j])

    def result(self, method: str) -> SelectionResult:
        return SelectionResult(
            indices=list(self.indices),
            step_scores=list(self.step_scores),
            rule=self.rule,
            method=method,
        )


def select_greedy(
    store: GradientStore,
    dirs: Sequence[np.ndarray],
    num_select: int,
    rule: str = "cosine_sum",
) -> SelectionResult:
    """Greedy selection maximizing the rule's alignment at every step."""
    _check_budget(store, num_select)
    engine = _GreedyEngine(store, dirs, rule)
    for _ in range(num_select):
        i, score = engine.pick()
        engine.add(i, score)
    return engine.result("select")


def select_batch(
    store: GradientStore,
    dirs: Sequence[np.ndarray],
    num_select: int,
    batch_size: int,
) -> SelectionResult:
    """Windowed greedy: scan candidates in index-order windows of batch_size,
    greedily taking ceil(M * batch_size / n) per window while the running sums
    carry across windows. A trailing global pass covers any rounding shortfall.
    """
    _check_budget(store, num_select)
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = store.num_examples
    per_window = math.ceil(num_select * batch_size / n)
    engine = _GreedyEngine(store, dirs, "cosine_sum")
    allowed = np.zeros(n, dtype=bool)
    for w0 in range(0, n, batch_size):
        if len(engine.indices) >= num_select:
            break
        allowed[:] = False
        allowed[w0 : w0 + batch_size] = True
        window_budget = min(
            per_window,
            num_select - len(engine.indices),
            int(allowed.sum()),
        )
        for _ in range(window_budget):
            i, score = engine.pick(allowed)
            engine.add(i, score)
    while len(engine.indices) < num_select:
        i, score = engine.pick()
        engine.add(i, score)
    result = engine.result("select_batch")
    return result


def select_baseline(
    store: GradientStore,
    dirs: Sequence[np.ndarray],
    num_select: int,
    method: str,
    seed: int = 0,
) -> SelectionResult:
    """Non-greedy reference selectors sharing the store's cached statistics."""
    _check_budget(store, num_select)
    if method not in BASELINE_METHODS:
        raise ValueError(f"unknown baseline {method!r}")
    n = store.num_examples
    static = np.zeros(n)
    for j, d in enumerate(dirs):
        d = np.asarray(d, dtype=np.float64)
        for start, stop, block in store.iter_blocks(j):
            static[start:stop] += block @ d

    if method == "random":
        rng = np.random.default_rng(seed)
        chosen = rng.choice(n, size=num_select, replace=False)
        return SelectionResult(
            [int(i) for i in chosen],
            [float(static[i]) for i in chosen],
            rule="none",
            method=method,
        )
    if method in ("pmin", "pmax"):
        losses = store.final_losses
        key = losses if method == "pmin" else -losses
        order = np.lexsort((np.arange(n), key))[:num_select]
        return SelectionResult(
            [int(i) for i in order],
            [float(losses[i]) for i in order],
            rule="none",
            method=method,
        )
    if method == "topk":
        order = np.lexsort((np.arange(n), -static))[:num_select]
        return SelectionResult(
            [int(i) for i in order],
            [float(static[i]) for i in order],
            rule="dot",
            method=method,
        )

    # topk_balanced
    if not store.has_labels:
        raise ValueError("topk_balanced requires pseudolabels in the store")
    labels = store.pseudolabels
    num_classes = int(labels.max()) + 1
    cap = math.ceil(num_select / num_classes)
    picked: list[int] = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        order = members[np.lexsort((members, -static[members]))][:cap]
        picked.extend(int(i) for i in order)
    if len(picked) > num_select:
        picked = _balanced_truncate(picked, labels, static, num_select)
    elif len(picked) < num_select:
        logger.warning(
            "topk_balanced: some classes lack candidates, filling %d slots by score",
            num_select - len(picked),
        )
        taken = set(picked)
        rest = np.array([i for i in np.lexsort((np.arange(n), -static)) if i not in taken])
        picked.extend(int(i) for i in rest[: num_select - len(picked)])
    picked.sort(key=lambda i: (-static[i], i))
    return SelectionResult(
        picked, [float(static[i]) for i in picked], rule="dot", method="topk_balanced"
    )


def _balanced_truncate(
    picked: list[int], labels: np.ndarray, static: np.ndarray, num_select: int
) -> list[int]:
    """Drop lowest-scored members of the currently largest classes until M."""
    by_class: dict[int, list[int]] = {}
    for i in picked:
        by_class.setdefault(int(labels[i]), []).append(i)
    for members in by_class.values():
        members.sort(key=lambda i: (-static[i], i))
    total = len(picked)
    while total > num_select:
        largest = max(len(v) for v in by_class.values())
        # among the largest classes, drop the globally weakest tail item
        tail = [(static[v[-1]], -v[-1], c) for c, v in by_class.items() if len(v) == largest]
        _, _, c = min(tail)
        by_class[c].pop()
        total -= 1
    return [i for members in by_class.values() for i in members]


def _check_budget(store: GradientStore, num_select: int) -> None:
    if num_select < 1:
        raise ValueError("selection size must be positive")
    if num_select > store.num_examples:
        raise ValueError(
            f"cannot select {num_select} from {store.num_examples} examples"
        )


def write_selection(
    result: SelectionResult,
    path: str | Path,
    num_checkpoints: int,
    projection_dim: int,
    seeds: Sequence[int] = (),
) -> None:
    """Persist a selection as JSON with its run parameters."""
    payload = {
        "method": result.method,
        "rule": result.rule,
        "M": len(result.indices),
        "P": num_checkpoints,
        "k": projection_dim,
        "seeds": list(seeds),
        "indices": result.indices,
        "step_scores": result.step_scores,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_selection(path: str | Path) -> SelectionResult:
    data = json.loads(Path(path).read_text())
    return SelectionResult(
        indices=[int(i) for i in data["indices"]],
        step_scores=[float(s) for s in data["step_scores"]],
        rule=data["rule"],
        method=data["method"],
    )
