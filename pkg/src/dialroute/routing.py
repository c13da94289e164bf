"""Routers and the end-to-end routing pipeline.

A router picks, per turn, which expert answers. The retrieval router votes
with the k nearest pool entries by cosine; the oracle router peeks at gold;
the cascade router defers from the rank-0 expert on low confidence; the
classifier router is a logistic probe over frozen embeddings. Every tie in
the system resolves toward the lower priority rank.

A routed run records, per turn, the decision, the chosen expert's belief, and
the accumulated predicted state. Test-time triplets use the system's own
accumulated predictions as prior state ("predicted" mode); a "gold" prior
mode exists for diagnostics.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dialogue import (
    Corpus,
    Triplet,
    TurnBelief,
    aggregate_state,
    accumulate_dialogue,
    make_belief,
    render_belief,
    split_turn_key,
    triplet_of_turn,
)
from .embedding import ProjectionAdapter, project, serialize_triplet
from .errors import InputError
from .experts import ExpertId, ExpertPrediction, ExpertPool, judge_correct, validate_experts

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoutingDecision:
    key: str
    chosen: ExpertId
    votes: Mapping[ExpertId, int] = field(default_factory=dict)
    neighbors: tuple[tuple[str, float], ...] = ()
    confidence: float | None = None
    # Experts whose inference this turn actually paid for. The cascade pays
    # for the rank-0 expert on every turn and adds the fallback on deferrals;
    # every other router pays only for the chosen expert.
    invoked: tuple[ExpertId, ...] = ()


@dataclass
class TurnContext:
    """What a router may look at for one turn."""

    key: str
    triplet: Triplet
    gold_tlb: TurnBelief
    query_vector: np.ndarray | None
    predict: Callable[[ExpertId], ExpertPrediction]


class RetrievalRouter:
    """Majority vote over the k nearest pool entries by cosine.

    Entries are ranked by (score desc, turn key asc); vote ties go to the
    lower priority rank. With fewer than k entries in total, all of them vote.
    """

    kind = "retrieval"
    charges_router_cost = True

    def __init__(self, pools: Sequence[ExpertPool], k: int) -> None:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        self.k = k
        self.experts = validate_experts([pool.expert for pool in pools])
        keys: list[str] = []
        owners: list[ExpertId] = []
        rows: list[np.ndarray] = []
        seen: set[str] = set()
        for pool in pools:
            for entry in pool.entries:
                if entry.key in seen:
                    raise InputError(f"pool entry {entry.key!r} appears in more than one pool")
                seen.add(entry.key)
                keys.append(entry.key)
                owners.append(pool.expert)
                rows.append(np.asarray(entry.vector, dtype=np.float64))
        if not rows:
            raise InputError("all pools are empty; retrieval routing is impossible")
        self._keys = keys
        self._owners = owners
        self._matrix = np.vstack(rows)
        norms = np.linalg.norm(self._matrix, axis=1)
        self._row_norms = np.where(norms == 0.0, np.inf, norms)

    def decide(self, ctx: TurnContext) -> RoutingDecision:
        if ctx.query_vector is None:
            raise ValueError("retrieval routing requires a query embedding")
        q = np.asarray(ctx.query_vector, dtype=np.float64)
        if q.shape != (self._matrix.shape[1],):
            raise ValueError(
                f"query dim {q.shape} does not match pool dim {self._matrix.shape[1]}"
            )
        qnorm = float(np.linalg.norm(q))
        if qnorm == 0.0:
            scores = np.zeros(len(self._keys))
        else:
            scores = (self._matrix @ q) / (self._row_norms * qnorm)
        k_eff = min(self.k, len(self._keys))
        ranked = sorted(
            range(len(self._keys)),
            key=lambda i: (-scores[i], self._keys[i], self._owners[i].priority_rank),
        )[:k_eff]
        votes: dict[ExpertId, int] = {expert: 0 for expert in self.experts}
        for i in ranked:
            votes[self._owners[i]] += 1
        chosen = min(self.experts, key=lambda e: (-votes[e], e.priority_rank))
        neighbors = tuple((self._keys[i], float(scores[i])) for i in ranked)
        return RoutingDecision(ctx.key, chosen, votes, neighbors, None, (chosen,))


class OracleRouter:
    """Routes to the lowest-ranked expert whose prediction is exactly right;
    if nobody is right, to the lowest rank overall. Peeking at gold and at
    every expert's prediction is free; only the chosen expert is paid for."""

    kind = "oracle"
    charges_router_cost = False

    def __init__(self, experts: Sequence[ExpertId]) -> None:
        self.experts = validate_experts(experts)

    def decide(self, ctx: TurnContext) -> RoutingDecision:
        chosen = self.experts[0]
        for expert in self.experts:
            if judge_correct(ctx.predict(expert).tlb, ctx.gold_tlb):
                chosen = expert
                break
        return RoutingDecision(ctx.key, chosen, invoked=(chosen,))


class CascadeRouter:
    """Always runs the rank-0 expert; defers to the next rank when its
    confidence falls below the threshold. The boundary itself stays."""

    kind = "cascade"
    charges_router_cost = False

    def __init__(self, experts: Sequence[ExpertId], threshold: float) -> None:
        order = validate_experts(experts)
        if len(order) < 2:
            raise InputError("cascade routing needs at least two experts")
        if not 0.0 <= threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {threshold}")
        self.primary = order[0]
        self.fallback = order[1]
        self.threshold = threshold

    def decide(self, ctx: TurnContext) -> RoutingDecision:
        prediction = ctx.predict(self.primary)
        if prediction.confidence is None:
            raise InputError(
                f"cascade routing requires a confidence from {self.primary.name!r} "
                f"for turn {ctx.key!r}"
            )
        if prediction.confidence >= self.threshold:
            return RoutingDecision(
                ctx.key, self.primary, confidence=prediction.confidence, invoked=(self.primary,)
            )
        return RoutingDecision(
            ctx.key,
            self.fallback,
            confidence=prediction.confidence,
            invoked=(self.primary, self.fallback),
        )


def tune_cascade_threshold(observations: Sequence[tuple[float, bool, bool]]) -> float:
    """Pick the deferral threshold maximizing hold-out accuracy.

    Each observation is (rank-0 confidence, rank-0 correct, fallback correct).
    The grid is every distinct observed confidence plus {0, 1}; accuracy of a
    threshold is the fraction of turns the cascade rule answers correctly.
    Ties resolve to the largest threshold.
    """
    if not observations:
        raise InputError("cannot tune a cascade threshold without observations")
    for confidence, _, _ in observations:
        if not 0.0 <= confidence <= 1.0:
            raise InputError(f"confidence {confidence} outside [0, 1]")

    def accuracy(threshold: float) -> float:
        hits = sum(
            (primary_ok if confidence >= threshold else fallback_ok)
            for confidence, primary_ok, fallback_ok in observations
        )
        return hits / len(observations)

    grid = sorted({0.0, 1.0} | {confidence for confidence, _, _ in observations})
    return max(grid, key=lambda threshold: (accuracy(threshold), threshold))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))


@dataclass
class LogisticModel:
    """Logistic probe: probability that a turn belongs to the rank-1 expert."""

    weights: np.ndarray
    bias: float

    def probability(self, x: np.ndarray) -> float:
        x64 = np.asarray(x, dtype=np.float64)
        if x64.shape != self.weights.shape:
            raise ValueError(f"query dim {x64.shape} does not match model dim {self.weights.shape}")
        return float(_sigmoid(np.asarray(self.weights @ x64 + self.bias)))


def train_classifier_router(
    embeddings: np.ndarray,
    labels: np.ndarray,
    learning_rate: float = 0.1,
    epochs: int = 200,
) -> LogisticModel:
    """Full-batch logistic regression on frozen embeddings.

    ``labels`` holds 1 where the turn belongs to the rank-1 expert and 0 for
    rank 0. A single-class training set logs a warning and returns a
    degenerate model that always predicts that class.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"bad training shapes: {X.shape} vs {y.shape}")
    if X.shape[0] == 0:
        raise InputError("cannot train a classifier router on an empty hold-out")
    classes = set(np.unique(y))
    if not classes <= {0.0, 1.0}:
        raise ValueError(f"labels must be 0/1, got {sorted(classes)}")
    if len(classes) == 1:
        only = classes.pop()
        logger.warning(
            "classifier training set has a single class (%d); returning a constant router",
            int(only),
        )
        return LogisticModel(np.zeros(X.shape[1]), 25.0 if only == 1.0 else -25.0)
    weights = np.zeros(X.shape[1])
    bias = 0.0
    n = X.shape[0]
    for _ in range(epochs):
        residual = _sigmoid(X @ weights + bias) - y
        weights = weights - learning_rate * (X.T @ residual) / n
        bias = bias - learning_rate * float(np.mean(residual))
    return LogisticModel(weights, bias)


class ClassifierRouter:
    """Routes by the logistic probe; probability above one half picks the
    rank-1 expert, the boundary itself stays at rank 0."""

    kind = "classifier"
    charges_router_cost = True

    def __init__(self, model: LogisticModel, experts: Sequence[ExpertId]) -> None:
        order = validate_experts(experts)
        if len(order) != 2:
            raise InputError("classifier routing supports exactly two experts")
        self.model = model
        self.low, self.high = order

    def decide(self, ctx: TurnContext) -> RoutingDecision:
        if ctx.query_vector is None:
            raise ValueError("classifier routing requires a query embedding")
        p = self.model.probability(ctx.query_vector)
        chosen = self.high if p > 0.5 else self.low
        return RoutingDecision(ctx.key, chosen, invoked=(chosen,))


class ConstantRouter:
    """Always routes to one expert. Used for single-expert reference runs."""

    kind = "constant"
    charges_router_cost = False

    def __init__(self, expert: ExpertId) -> None:
        self.expert = expert

    def decide(self, ctx: TurnContext) -> RoutingDecision:
        return RoutingDecision(ctx.key, self.expert, invoked=(self.expert,))


# --- pipeline ---------------------------------------------------------------


@dataclass(frozen=True)
class TurnRecord:
    decision: RoutingDecision
    tlb: TurnBelief
    state: dict  # accumulated predicted state after this turn


@dataclass
class RoutedRun:
    records: list[TurnRecord]
    experts: tuple[ExpertId, ...]
    config: dict

    def __len__(self) -> int:
        return len(self.records)

    def keys(self) -> list[str]:
        return [record.decision.key for record in self.records]


def run_pipeline(
    corpus: Corpus,
    experts: Sequence[object],
    router: object,
    embedder: object | None = None,
    adapter: ProjectionAdapter | None = None,
    prior_mode: str = "predicted",
    config: Mapping[str, object] | None = None,
) -> RoutedRun:
    """Route every turn of a corpus and return the full run.

    ``experts`` are prediction sources (each with ``.id`` and
    ``.predict(triplet)``); ``embedder`` (with ``.embed(key, text)``) is
    required by routers that look at query vectors and may be combined with a
    projection ``adapter``. Expert failures abort with the dialogue and turn
    named.
    """
    if prior_mode not in ("predicted", "gold"):
        raise ValueError(f"prior_mode must be 'predicted' or 'gold', got {prior_mode!r}")
    expert_ids = validate_experts([e.id for e in experts])
    by_id = {e.id: e for e in experts}
    snapshot = {
        "router": router.kind,
        "charges_router_cost": bool(router.charges_router_cost),
        "prior_mode": prior_mode,
        **(dict(config) if config else {}),
    }
    records: list[TurnRecord] = []
    for dialogue in corpus:
        gold_states = (
            accumulate_dialogue(turn.gold_tlb for turn in dialogue.turns)
            if prior_mode == "gold"
            else None
        )
        state: dict = {}
        for t, turn in enumerate(dialogue.turns):
            if gold_states is None:
                prev = state
            else:
                prev = {} if t == 0 else gold_states[t - 1]
            triplet = triplet_of_turn(dialogue, t, prev)
            query_vector = None
            if embedder is not None:
                base = embedder.embed(triplet.key, serialize_triplet(triplet))
                query_vector = project(adapter, base) if adapter is not None else base
            memo: dict[ExpertId, ExpertPrediction] = {}

            def predict(expert_id: ExpertId, _triplet: Triplet = triplet) -> ExpertPrediction:
                if expert_id not in memo:
                    try:
                        source = by_id[expert_id]
                    except KeyError:
                        raise ValueError(f"unknown expert {expert_id!r}") from None
                    try:
                        memo[expert_id] = source.predict(_triplet)
                    except InputError as exc:
                        raise InputError(
                            f"dialogue {_triplet.dialogue_id!r} turn {_triplet.turn_id}: {exc}"
                        ) from None
                return memo[expert_id]

            ctx = TurnContext(triplet.key, triplet, turn.gold_tlb, query_vector, predict)
            decision = router.decide(ctx)
            chosen = predict(decision.chosen)
            state = aggregate_state(state, chosen.tlb)
            records.append(TurnRecord(decision, dict(chosen.tlb), state))
    return RoutedRun(records, tuple(expert_ids), snapshot)


# --- file format ------------------------------------------------------------


def write_run(run: RoutedRun, stream) -> None:
    for record in run.records:
        decision = record.decision
        line = {
            "key": decision.key,
            "expert": decision.chosen.name,
            "votes": {e.name: decision.votes[e] for e in sorted(decision.votes, key=lambda x: x.name)},
            "neighbors": [[key, score] for key, score in decision.neighbors],
            "tlb": render_belief(record.tlb),
            "invoked": [e.name for e in decision.invoked],
        }
        if decision.confidence is not None:
            line["confidence"] = decision.confidence
        stream.write(json.dumps(line, ensure_ascii=False) + "\n")
    summary = {
        "summary": {
            "experts": [
                {"name": e.name, "priority_rank": e.priority_rank} for e in run.experts
            ],
            "config": run.config,
            "turns": len(run.records),
        }
    }
    stream.write(json.dumps(summary, ensure_ascii=False) + "\n")


def save_run(run: RoutedRun, path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        write_run(run, handle)


def load_run(path: str) -> RoutedRun:
    """Reload a routed run; accumulated states are refolded from the recorded
    beliefs, so metrics computed from the file match the in-memory run."""
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open run {path!r}: {exc}") from None
    raw_records: list[dict] = []
    summary: dict | None = None
    with handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise InputError(f"{path}:{lineno}: record is not an object")
            if "summary" in record:
                if summary is not None:
                    raise InputError(f"{path}:{lineno}: multiple summary records")
                summary = record["summary"]
            elif summary is not None:
                raise InputError(f"{path}:{lineno}: turn record after the summary")
            else:
                raw_records.append(record)
    if summary is None:
        raise InputError(f"run {path!r} has no trailing summary record")
    experts_raw = summary.get("experts")
    if not isinstance(experts_raw, list):
        raise InputError(f"run {path!r}: summary lacks the expert list")
    experts = validate_experts(
        [ExpertId(e["name"], int(e["priority_rank"])) for e in experts_raw]
    )
    by_name = {e.name: e for e in experts}
    records: list[TurnRecord] = []
    states: dict[str, dict] = {}
    for record in raw_records:
        key = record.get("key")
        name = record.get("expert")
        if not isinstance(key, str) or not isinstance(name, str) or name not in by_name:
            raise InputError(f"run {path!r}: malformed turn record {record!r}")
        votes_raw = record.get("votes", {})
        votes = {}
        for vote_name, count in votes_raw.items():
            if vote_name not in by_name:
                raise InputError(f"run {path!r}: vote for unknown expert {vote_name!r}")
            votes[by_name[vote_name]] = int(count)
        neighbors = tuple((n[0], float(n[1])) for n in record.get("neighbors", []))
        tlb, _ = make_belief(record.get("tlb", {}))
        invoked = tuple(by_name[n] for n in record.get("invoked", [name]))
        confidence = record.get("confidence")
        decision = RoutingDecision(
            key,
            by_name[name],
            votes,
            neighbors,
            None if confidence is None else float(confidence),
            invoked,
        )
        dialogue_id, _ = split_turn_key(key)
        state = aggregate_state(states.get(dialogue_id, {}), tlb)
        states[dialogue_id] = state
        records.append(TurnRecord(decision, tlb, state))
    config = summary.get("config", {})
    if not isinstance(config, dict):
        raise InputError(f"run {path!r}: summary config is not an object")
    return RoutedRun(records, tuple(experts), config)
