"""Self-contained synthetic benchmark.

Generates a seeded corpus whose turns fall into two latent clusters (hotel
talk and restaurant talk) buried under shared filler vocabulary, plus two
synthetic experts with complementary competence: the cheap one is accurate on
hotel turns, the expensive one on restaurant turns. On top of that it runs
the whole pipeline: hash-embed the hold-out, mine pairs, train the adapter,
build pools, route the test corpus several ways, and report accuracy against
cost. Everything is a pure function of the spec's seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dialogue import (
    Corpus,
    Dialogue,
    SlotName,
    Turn,
    save_corpus,
)
from .embedding import (
    EmbeddingStore,
    HashEmbedder,
    ProjectionAdapter,
    project,
    save_adapter,
    save_store,
    serialize_triplet,
)
from .experts import (
    LLM,
    SLM,
    ExpertPool,
    SyntheticExpert,
    SyntheticProfile,
    assign_expert_label,
    build_pools,
    sample_pool,
    save_pool,
    write_predictions,
)
from .metrics import CostTable, Report, make_report, make_series, save_report, save_series
from .routing import (
    ConstantRouter,
    OracleRouter,
    RetrievalRouter,
    RoutedRun,
    run_pipeline,
    save_run,
)
from .seeding import subseed
from .supervision import (
    TrainConfig,
    merge_pairs,
    mine_expert_pairs,
    mine_task_pairs,
    save_pairs,
    train_adapter,
)

HOTEL_DOMAIN = "hotel"
RESTAURANT_DOMAIN = "restaurant"

HOTEL_WORDS = (
    "hotel guesthouse lodge suite pillow checkin nights parking breakfast spa "
    "roomkey elevator lobby concierge hostel blanket kingbed balcony towels minibar"
).split()

RESTAURANT_WORDS = (
    "restaurant bistro menu dinner chef cuisine reservation table starter dessert "
    "vegan spicy noodles pasta grill sushi brunch waiter appetizer teriyaki"
).split()

FILLER_WORDS = (
    "please could would like need want find looking thanks okay great sure maybe "
    "actually sounds good help something nice town place tonight tomorrow soon "
    "really also just another option prefer any fine yes friend visit trip weekend plan"
).split()

HOTEL_SLOTS: dict[str, tuple[str, ...]] = {
    "area": ("north", "south", "east", "west", "centre"),
    "price": ("budget", "moderate", "upscale"),
    "parking": ("yes", "no"),
    "stars": ("two", "three", "four", "five"),
    "nights": ("one", "two", "three", "four"),
}

RESTAURANT_SLOTS: dict[str, tuple[str, ...]] = {
    "food": ("italian", "chinese", "indian", "thai", "british"),
    "area": ("north", "south", "east", "west", "centre"),
    "time": ("noon", "evening", "late", "early"),
    "seats": ("couple", "group", "family", "solo"),
    "price": ("budget", "moderate", "upscale"),
}

_CLUSTERS = {
    HOTEL_DOMAIN: (HOTEL_WORDS, HOTEL_SLOTS),
    RESTAURANT_DOMAIN: (RESTAURANT_WORDS, RESTAURANT_SLOTS),
}


@dataclass(frozen=True)
class SimulationSpec:
    """Knobs for the synthetic benchmark. Defaults give a corpus where base
    embeddings route decently but the trained adapter still has headroom."""

    dialogues: int = 200
    holdout_dialogues: int = 80
    min_turns: int = 3
    max_turns: int = 6
    mixed_fraction: float = 0.1
    embedding_dim: int = 256
    noise_words: int = 32
    slm_accuracy_in: float = 0.95
    slm_accuracy_out: float = 0.30
    llm_accuracy_in: float = 0.95
    llm_accuracy_out: float = 0.30
    slm_confidence_correct: float = 0.85
    slm_confidence_wrong: float = 0.35
    llm_confidence_correct: float = 0.90
    llm_confidence_wrong: float = 0.40
    k: int = 10
    pool_size: int = 100
    pairs_per_query: int = 25
    margin: float = 0.0
    learning_rate: float = 5.0
    epochs: int = 60
    slm_cost: float = 0.04
    llm_cost: float = 3000.0
    router_cost: float = 0.02
    seed: int = 0


def _make_turns(
    rng: np.random.Generator, dialogue_id: str, clusters: Sequence[str], spec: SimulationSpec
) -> list[Turn]:
    n_turns = int(rng.integers(spec.min_turns, spec.max_turns + 1))
    turns: list[Turn] = []
    for t in range(n_turns):
        domain = clusters[int(rng.integers(len(clusters)))]
        words, slots = _CLUSTERS[domain]
        slot_names = sorted(slots)
        n_slots = 1 + int(rng.random() < 0.35)
        picked = rng.choice(len(slot_names), size=min(n_slots, len(slot_names)), replace=False)
        tlb: dict[SlotName, str] = {}
        value_words: list[str] = []
        for index in sorted(int(i) for i in picked):
            slot = slot_names[index]
            value = slots[slot][int(rng.integers(len(slots[slot])))]
            tlb[SlotName(domain, slot)] = value
            value_words.append(value)
        cluster_words = [words[int(i)] for i in rng.choice(len(words), size=2, replace=False)]
        noise = [FILLER_WORDS[int(i)] for i in rng.integers(0, len(FILLER_WORDS), spec.noise_words)]
        tokens = cluster_words + value_words + noise
        order = rng.permutation(len(tokens))
        user = " ".join(tokens[int(i)] for i in order)
        if t == 0:
            system = ""
        else:
            sys_words = [words[int(rng.integers(len(words)))]] + [
                FILLER_WORDS[int(i)] for i in rng.integers(0, len(FILLER_WORDS), 3)
            ]
            system = " ".join(sys_words)
        turns.append(Turn(t, system, user, tlb))
    return turns


def generate_corpus(spec: SimulationSpec, count: int, prefix: str, stream: str) -> Corpus:
    """Deterministically generate ``count`` dialogues: mostly single-cluster,
    a ``mixed_fraction`` sampling turns from both clusters."""
    rng = np.random.default_rng(subseed(spec.seed, f"corpus:{stream}"))
    dialogues: list[Dialogue] = []
    for i in range(count):
        dialogue_id = f"{prefix}{i:04d}"
        if float(rng.random()) < spec.mixed_fraction:
            clusters = [HOTEL_DOMAIN, RESTAURANT_DOMAIN]
        else:
            clusters = [(HOTEL_DOMAIN, RESTAURANT_DOMAIN)[int(rng.integers(2))]]
        turns = _make_turns(rng, dialogue_id, clusters, spec)
        dialogues.append(Dialogue(dialogue_id, frozenset(clusters), tuple(turns)))
    return Corpus(tuple(dialogues))


def _mentions(vocabulary: Sequence[str]):
    vocab = frozenset(vocabulary)
    return lambda triplet: bool(vocab & set(triplet.user_utterance.split()))


def make_experts(spec: SimulationSpec, gold: dict) -> tuple[SyntheticExpert, SyntheticExpert]:
    slm = SyntheticExpert(
        SLM,
        SyntheticProfile(
            _mentions(HOTEL_WORDS),
            spec.slm_accuracy_in,
            spec.slm_accuracy_out,
            spec.slm_confidence_correct,
            spec.slm_confidence_wrong,
        ),
        gold,
        subseed(spec.seed, "expert:slm"),
    )
    llm = SyntheticExpert(
        LLM,
        SyntheticProfile(
            _mentions(RESTAURANT_WORDS),
            spec.llm_accuracy_in,
            spec.llm_accuracy_out,
            spec.llm_confidence_correct,
            spec.llm_confidence_wrong,
        ),
        gold,
        subseed(spec.seed, "expert:llm"),
    )
    return slm, llm


@dataclass
class SimulationResult:
    spec: SimulationSpec
    out_dir: Path
    test_corpus: Corpus
    holdout_corpus: Corpus
    runs: dict[str, RoutedRun] = field(default_factory=dict)
    reports: dict[str, Report] = field(default_factory=dict)
    adapter: ProjectionAdapter | None = None
    loss_history: list[float] = field(default_factory=list)


def run_simulation(spec: SimulationSpec, out_dir: str | Path) -> SimulationResult:
    """Generate the benchmark and run the whole pipeline into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    test_corpus = generate_corpus(spec, spec.dialogues, "dlg", "test")
    holdout_corpus = generate_corpus(spec, spec.holdout_dialogues, "hld", "holdout")
    save_corpus(test_corpus, str(out / "corpus_test.jsonl"))
    save_corpus(holdout_corpus, str(out / "corpus_holdout.jsonl"))

    gold = {**holdout_corpus.gold_tlbs(), **test_corpus.gold_tlbs()}
    slm, llm = make_experts(spec, gold)
    experts = [slm, llm]

    holdout_turns = holdout_corpus.labeled()
    test_turns = test_corpus.labeled()
    for expert in experts:
        preds = [expert.predict(t.triplet) for t in [*holdout_turns, *test_turns]]
        write_predictions(preds, str(out / f"predictions_{expert.id.name}.jsonl"))

    embedder = HashEmbedder(spec.embedding_dim, subseed(spec.seed, "embedder"))
    store = EmbeddingStore.build(
        (t.key, embedder.embed(t.key, serialize_triplet(t.triplet))) for t in holdout_turns
    )
    save_store(store, str(out / "embeddings_holdout.jsonl"))

    holdout_preds = {
        expert.id: {t.key: expert.predict(t.triplet).tlb for t in holdout_turns}
        for expert in experts
    }
    labels = {
        t.key: assign_expert_label(
            {eid: preds[t.key] for eid, preds in holdout_preds.items()}, t.gold_tlb
        ).name
        for t in holdout_turns
    }
    task_pairs = mine_task_pairs(holdout_turns, spec.pairs_per_query)
    expert_pairs = mine_expert_pairs(holdout_turns, labels, store, spec.pairs_per_query)
    pairs = merge_pairs(task_pairs, expert_pairs)
    save_pairs(pairs, str(out / "pairs.json"))

    train_config = TrainConfig(
        pairs_per_query=spec.pairs_per_query,
        margin=spec.margin,
        learning_rate=spec.learning_rate,
        epochs=spec.epochs,
        seed=subseed(spec.seed, "train"),
    )
    adapter, history = train_adapter(pairs, store, train_config)
    save_adapter(adapter, str(out / "adapter.json"))
    with open(out / "loss_history.json", "w", encoding="utf-8") as handle:
        json.dump({"loss_history": history}, handle)
        handle.write("\n")

    identity = ProjectionAdapter.identity(spec.embedding_dim)

    def build_sampled_pools(active: ProjectionAdapter, tag: str) -> list[ExpertPool]:
        projected = {t.key: project(active, store.lookup(t.key)) for t in holdout_turns}
        pools = build_pools(holdout_turns, holdout_preds, projected)
        sampled = []
        for expert_id in sorted(pools, key=lambda e: e.priority_rank):
            pool = sample_pool(
                pools[expert_id], spec.pool_size, subseed(spec.seed, f"pool:{expert_id.name}")
            )
            save_pool(pool, str(out / f"pool_{tag}_{expert_id.name}.json"))
            sampled.append(pool)
        return sampled

    pools_base = build_sampled_pools(identity, "base")
    pools_trained = build_sampled_pools(adapter, "trained")

    costs = CostTable({SLM.name: spec.slm_cost, LLM.name: spec.llm_cost}, spec.router_cost)
    result = SimulationResult(spec, out, test_corpus, holdout_corpus)
    result.adapter = adapter
    result.loss_history = history

    def execute(name: str, router, *, use_embedder: bool, active: ProjectionAdapter | None):
        run = run_pipeline(
            test_corpus,
            experts,
            router,
            embedder=embedder if use_embedder else None,
            adapter=active,
            config={"k": spec.k, "pool_size": spec.pool_size, "seed": spec.seed, "name": name},
        )
        save_run(run, str(out / f"run_{name}.jsonl"))
        report = make_report(run, test_corpus, costs, training_domains={HOTEL_DOMAIN})
        save_report(report, str(out / f"report_{name}.json"))
        result.runs[name] = run
        result.reports[name] = report

    execute("slm_only", ConstantRouter(SLM), use_embedder=False, active=None)
    execute("llm_only", ConstantRouter(LLM), use_embedder=False, active=None)
    execute("oracle", OracleRouter([SLM, LLM]), use_embedder=False, active=None)
    execute(
        "retrieval_base",
        RetrievalRouter(pools_base, spec.k),
        use_embedder=True,
        active=identity,
    )
    execute(
        "retrieval_trained",
        RetrievalRouter(pools_trained, spec.k),
        use_embedder=True,
        active=adapter,
    )

    series = make_series(sorted(result.reports.items()))
    save_series(series, str(out / "series.json"))
    return result
