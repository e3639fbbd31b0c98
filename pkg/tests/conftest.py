import sys

import pytest

from dasr.synthetic import write_fixture_corpus


@pytest.fixture(scope="session")
def corpus_manifest(tmp_path_factory):
    """Path to a small synthetic simulation corpus manifest."""
    return write_fixture_corpus(tmp_path_factory.mktemp("corpus"), seed=0)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
