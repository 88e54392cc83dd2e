import numpy as np
import pytest

from factorcell.context import Categorical, ContextSchema, Numeric
from factorcell.model import LanguageModel, ModelConfig

MIXED = ContextSchema((Categorical("lang", 3), Numeric("lat", 40.0, 5.0)))
CATEGORICAL = ContextSchema((Categorical("lang", 3), Categorical("stars", 2)))

# (variant, bias_mode, schema) covering every parameter array the model can own.
VARIANT_CASES = [
    ("unadapted", "off", MIXED),
    ("softmax_bias", "projected", MIXED),
    ("softmax_bias", "one_hot", CATEGORICAL),
    ("concat_cell", "projected", MIXED),
    ("concat_cell", "one_hot", CATEGORICAL),
    ("factor_cell", "projected", MIXED),
    ("factor_cell", "one_hot", CATEGORICAL),
]


def case_id(case):
    return f"{case[0]}-{case[1]}"


def sample_context(schema, rng):
    out = []
    for var in schema.variables:
        if isinstance(var, Categorical):
            out.append(int(rng.integers(var.cardinality)))
        else:
            out.append(float(rng.normal(var.mean, var.std)))
    return tuple(out)


def make_model(variant, bias_mode="projected", schema=MIXED, V=9, e=5, d=6, k=3, r=2, seed=0,
               scale=0.5):
    """Small model whose every array (biases and adaptation bases included) is random."""
    cfg = ModelConfig(variant=variant, vocab_size=V, embed_dim=e, hidden_dim=d, context_dim=k,
                      rank=r if variant == "factor_cell" else 0, bias_mode=bias_mode)
    model = LanguageModel.create(cfg, schema, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for arr in model.params.values():
        arr[...] = rng.normal(0.0, scale, arr.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance reporting: one PASS/FAIL line per numbered criterion at the end of the run.
_CRITERIA = {}


def pytest_runtest_logreport(report):
    n = dict(report.user_properties).get("criterion")
    if n is None:
        return
    if report.when == "call" or report.failed:
        detail = dict(report.user_properties).get("detail", "")
        prev = _CRITERIA.get(n, (True, ""))
        _CRITERIA[n] = (prev[0] and report.passed, detail or prev[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
