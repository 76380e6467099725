import pytest

# criterion number -> (passed, description), filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}")

from chunkbench.docmodel import generate_corpus


@pytest.fixture(scope="session")
def corpus():
    """The seed-1 reference corpus, 20 documents per category."""
    manifest, docs = generate_corpus(1, 20)
    return manifest, docs


@pytest.fixture(scope="session")
def docs(corpus):
    return corpus[1]


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    """One full seed-1 experiment, shared by the bench and acceptance tests."""
    from chunkbench.bench import ExperimentConfig, run_experiment

    out = tmp_path_factory.mktemp("experiment")
    result = run_experiment(out, ExperimentConfig(seed=1))
    result["out"] = out
    return result
