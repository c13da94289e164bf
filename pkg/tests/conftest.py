import json

import pytest

from dialroute import Corpus, SimulationSpec, run_simulation
from dialroute.dialogue import parse_dialogues


def trn(turn_id, user, system="", tlb=None):
    return {"turn_id": turn_id, "system": system, "user": user, "gold_tlb": tlb or {}}


def dlg(dialogue_id, turns, domains=("hotel",)):
    return {"dialogue_id": dialogue_id, "domains": list(domains), "turns": turns}


def corpus_of(*dialogues) -> Corpus:
    return parse_dialogues(json.dumps(d) for d in dialogues)


@pytest.fixture(scope="session")
def small_sim(tmp_path_factory):
    """One small synthetic pipeline run shared by the slower integration tests."""
    out = tmp_path_factory.mktemp("sim")
    spec = SimulationSpec(
        dialogues=30, holdout_dialogues=20, embedding_dim=64, pool_size=40, epochs=10, seed=3
    )
    return run_simulation(spec, out)
