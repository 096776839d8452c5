import numpy as np
import pytest

from genids.can_ingest import balanced_subset_indices, split_train_test
from genids.features import extract_stream
from genids.gen_classifier import GenClassifier, ModelConfig, TrainConfig, train
from genids.traffic_synth import default_scenarios, generate


@pytest.fixture(scope="session")
def desk_data():
    frames = generate(scenarios=default_scenarios(30.0), duration=30.0, seed=3)
    X, Y = extract_stream(frames)
    split = split_train_test(Y, "3:1", seed=1)
    idx = balanced_subset_indices(Y, split.train_idx, per_attack=1500, seed=2)
    return X, Y, split, idx


@pytest.fixture(scope="session")
def desk_model(desk_data):
    """A small-budget model trained on the mixed synthetic set."""
    X, Y, _, idx = desk_data
    model = GenClassifier.create(ModelConfig(), seed=4)
    model, trace, _ = train(model, X[idx], Y[idx], TrainConfig(iterations=20, eval_every=2, seed=5))
    return model, trace


def pytest_terminal_summary(terminalreporter):
    import verdicts

    if verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(verdicts.LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
