import numpy as np
import pytest

from nphct.phantom_eval import make_test_template, train_phantom_model


@pytest.fixture(scope="session")
def template_pair():
    """(TemplateSpace, noise-free template phantom)."""
    return make_test_template()


@pytest.fixture(scope="session")
def test_template(template_pair):
    return template_pair[0]


@pytest.fixture(scope="session")
def tissue_model(test_template):
    return train_phantom_model(test_template)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
