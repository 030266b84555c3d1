import numpy as np
import pytest

from specrec.data import popularity, split_debiased, synth_powerlaw
from specrec.model import EmbeddingPair, TrainConfig, train

_criteria: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    cid = str(marker.args[0])
    entry = _criteria.setdefault(cid, {"passed": True, "details": []})
    entry["passed"] &= rep.passed
    detail = dict(item.user_properties).get("detail")
    entry["details"].append(f"{item.name}: {detail}" if detail else item.name)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")

    def key(cid):
        num = "".join(ch for ch in cid if ch.isdigit())
        return (int(num or 0), cid)

    for cid in sorted(_criteria, key=key):
        entry = _criteria[cid]
        status = "PASS" if entry["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {cid}: {status} | " + "; ".join(entry["details"]))


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement to the criterion summary."""

    def _set(text):
        record_property("detail", text)

    return _set


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pair(rng, n, m, d):
    return EmbeddingPair(rng.normal(size=(n, d)), rng.normal(size=(m, d)))


# desk-scale Zipf setting shared by several acceptance criteria
ZIPF = dict(n=2000, m=1000, alpha=1.5, per_user=20, seed=7)
ZIPF_CONFIG = TrainConfig(d=64, loss="mse", learning_rate=0.01, epochs=200, full_batch=True, seed=1)


@pytest.fixture(scope="session")
def zipf_data():
    return synth_powerlaw(ZIPF["n"], ZIPF["m"], ZIPF["alpha"], ZIPF["per_user"], ZIPF["seed"])


@pytest.fixture(scope="session")
def zipf_model(zipf_data):
    import time

    t0 = time.perf_counter()
    E, log = train(zipf_data, ZIPF_CONFIG)
    return {"E": E, "log": log, "r": popularity(zipf_data), "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def zipf_debiased(zipf_data):
    return split_debiased(zipf_data, ZIPF["seed"])
