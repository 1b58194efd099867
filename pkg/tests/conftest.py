import math
import time

import pytest

from ndp_nmpc import predictor as pr
from ndp_nmpc.data_pipeline import CollectConfig, collect_scenario, split_shuffle
from ndp_nmpc.downwash import DownwashParams

# desk-scale training: far fewer epochs than the full schedule, compensated by a larger step
DESK_EPOCHS = 150
DESK_LR = 1e-3
TIMINGS = {}


@pytest.fixture(scope="session")
def collection():
    t0 = time.perf_counter()
    col = collect_scenario(CollectConfig(), DownwashParams(), seed=0)
    TIMINGS["collect"] = time.perf_counter() - t0
    return col


@pytest.fixture(scope="session")
def dataset(collection):
    return split_shuffle(collection.samples, 0.75, seed=0)


@pytest.fixture(scope="session")
def trainer(dataset):
    """Cached training: ``trainer(gamma, mode, per_step=False, epochs=DESK_EPOCHS)``."""
    train_set, _ = dataset
    cache = {}

    def get(gamma=4.0, mode="clip", per_step=False, epochs=DESK_EPOCHS, seed=0):
        key = (gamma, mode, per_step, epochs, seed)
        if key not in cache:
            t0 = time.perf_counter()
            model = pr.init_model(seed=seed, gamma=gamma, sn_mode=mode)
            cfg = pr.TrainConfig(epochs=epochs, learning_rate=DESK_LR, dtype="float32", seed=seed,
                                 sn_per_step=per_step)
            cache[key] = pr.train(model, train_set.X, train_set.Y, cfg)
            TIMINGS[f"train{key}"] = time.perf_counter() - t0
        return cache[key]

    return get


@pytest.fixture(scope="session")
def flight_model(trainer):
    """The predictor flown in the closed-loop experiments: gamma = 4, clip mode."""
    return trainer(4.0, "clip")[0]


@pytest.fixture(scope="session")
def unnormalized_model(trainer):
    return trainer(math.inf, "clip")[0]


@pytest.fixture(scope="session")
def sweep_model(trainer):
    """gamma = 4 with exact rescaling after every step, used for the gamma sweep."""
    return trainer(4.0, "exact", per_step=True)[0]


@pytest.fixture(scope="session")
def closed_loop_runs(tmp_path_factory, flight_model):
    """Baseline and predictor flights of the default scenario for its three seeds."""
    from ndp_nmpc.harness.runner import run_closed_loop
    from ndp_nmpc.harness.scenario import load_scenario

    root = tmp_path_factory.mktemp("closed_loop")
    base_cfg = load_scenario(predictor__baseline=True)
    ndp_cfg = load_scenario(predictor__model="session-model")
    t0 = time.perf_counter()
    for seed in base_cfg.seeds:
        run_closed_loop(base_cfg, root / "baseline" / f"seed{seed}", seed=seed)
        run_closed_loop(ndp_cfg, root / "ndp" / f"seed{seed}", seed=seed, model=flight_model)
    TIMINGS["flights"] = time.perf_counter() - t0
    return root / "baseline", root / "ndp"


@pytest.fixture(scope="session")
def widened_model(dataset):
    """Predictor trained on the same relative states labelled by a field twice as wide."""
    import dataclasses

    from ndp_nmpc.downwash import true_disturbance

    train_set, _ = dataset
    wide = dataclasses.replace(DownwashParams(), sigma_r=0.4)
    Y = true_disturbance(train_set.rel_p, train_set.rel_v, wide)
    model = pr.init_model(seed=0, gamma=4.0)
    return pr.train(model, train_set.X, Y, pr.TrainConfig(epochs=40, learning_rate=DESK_LR, dtype="float32"))[0]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
