import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dyve import cli  # noqa: E402
from dyve.data import save_dataset  # noqa: E402
from dyve.knobs import KnobConfig  # noqa: E402
from dyve.model import Conv, FullyConnected, LayerParams, MaxPool, ReLU, Softmax, save_model  # noqa: E402
from dyve.trainer import build_fixture  # noqa: E402


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


FIXTURE_DEPENDENT = {"fixture_bundle", "fixture_files", "tuned", "tuned_bench", "sweep_check"}


def pytest_collection_modifyitems(items):
    for item in items:
        if FIXTURE_DEPENDENT & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)


def random_conv(rng, n_in=None, n_out=None, k=None, stride=None, pad=None, h=None, w=None, bias=True):
    """A random Conv spec, its params and a fitting random input."""
    n_in = n_in or int(rng.integers(1, 5))
    n_out = n_out or int(rng.integers(1, 5))
    k = k or int(rng.integers(1, 4))
    stride = stride or int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2)) if pad is None else pad
    h = h or int(rng.integers(k, 9))
    w = w or int(rng.integers(k, 9))
    spec = Conv(n_in, n_out, k, stride, pad)
    weight = rng.normal(0, 0.5, (n_out, n_in, k, k)).astype(np.float32)
    b = rng.normal(0, 0.3, n_out).astype(np.float32) if bias else np.zeros(n_out, np.float32)
    x = rng.normal(0, 1, (n_in, h, w)).astype(np.float32)
    return spec, LayerParams.build(weight, b), x


def random_fc(rng, n_in=None, n_out=None):
    n_in = n_in or int(rng.integers(1, 40))
    n_out = n_out or int(rng.integers(1, 12))
    spec = FullyConnected(n_in, n_out)
    params = LayerParams.build(rng.normal(0, 0.5, (n_out, n_in)).astype(np.float32),
                               rng.normal(0, 0.3, n_out).astype(np.float32))
    return spec, params, rng.normal(0, 1, n_in).astype(np.float32)


def small_net(seed=0, shape=(3, 8, 8), classes=4, width=4):
    from dyve.model import build_network
    layers = [Conv(shape[0], width, 3, 1, 1), ReLU(), MaxPool(2),
              Conv(width, 2 * width, 3, 1, 1), ReLU(), MaxPool(2),
              FullyConnected(2 * width * (shape[1] // 4) * (shape[2] // 4), classes), Softmax()]
    return build_network(layers, shape, classes, seed=seed)


@pytest.fixture(scope="session")
def fixture_bundle():
    """The trained desk-scale fixture (default seeds)."""
    return build_fixture()


@pytest.fixture(scope="session")
def fixture_files(fixture_bundle, tmp_path_factory):
    d = tmp_path_factory.mktemp("fixture")
    save_model(fixture_bundle.net, d / "fixture.dyve")
    save_dataset(fixture_bundle.data, d / "fixture.dyvd")
    return d


@pytest.fixture(scope="session")
def tuned(fixture_files):
    """Knobs tuned on the fixture's tune split through ``dyve tune``."""
    d = fixture_files
    rc = cli.main(["tune", "--model", str(d / "fixture.dyve"), "--data", str(d / "fixture.dyvd"),
                   "--budget", "0.5", "--out", str(d / "knobs.json"), "--report", str(d / "tune.json"),
                   "--seed", "0", "--no-timestamp"])
    assert rc == 0
    return KnobConfig.load(d / "knobs.json"), json.loads((d / "tune.json").read_text())


@pytest.fixture(scope="session")
def tuned_bench(fixture_files, tuned):
    """``dyve bench`` of the tuned knobs over the whole heldout split."""
    d = fixture_files
    rc = cli.main(["bench", "--model", str(d / "fixture.dyve"), "--data", str(d / "fixture.dyvd"),
                   "--knobs", str(d / "knobs.json"), "--split", "heldout",
                   "--report", str(d / "bench.json"), "--no-timestamp"])
    assert rc == 0
    return json.loads((d / "bench.json").read_text())


@pytest.fixture(scope="session")
def sweep_check(fixture_bundle):
    """Bisection and exhaustive sweep over a 17-point max_act grid on the last conv layer.

    The grid spans a quarter of the estimated range so the feasibility edge
    falls inside it. Returns ``(bisected value, largest feasible grid value,
    grid, feasibility per point)``.
    """
    from dyve.knobs import LayerKnobs
    from dyve.tuner import ParamRange, TuningSet, _Scorer, binary_search_param, estimate_ranges

    net = fixture_bundle.net
    layer = 6
    tune = fixture_bundle.data.split("tune")
    tuning = TuningSet(tune.inputs[:300], tune.labels[:300])
    ranges = estimate_ranges(net, tuning)[layer]
    rng = ParamRange.from_bounds(0.0, ranges["max_act_thresh"].upper / 4, 16)
    scorer = _Scorer(net, tuning, 0.5)
    scorer.advance(KnobConfig.inert(len(net.layers)), layer)

    def config(v):
        cfg = KnobConfig.inert(len(net.layers))
        cfg[layer] = LayerKnobs(sdss_enabled=True, max_act_thresh=v, del_act_thresh=ranges["del_act_thresh"].upper)
        return cfg

    chosen = binary_search_param("max_act_thresh", layer, rng, net, config(0.0), scorer=scorer).chosen
    grid = [rng.value(j) for j in range(rng.steps + 1)]
    feasible = [scorer.feasible(scorer.score(config(v))[0]) for v in grid]
    best = max((v for v, ok in zip(grid, feasible) if ok), default=rng.lower)
    return chosen, best, grid, feasible
