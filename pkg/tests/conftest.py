import numpy as np
import pytest

from promptkg.data import add_inverse_triples, build_neighbor_index, load_dataset_dir
from promptkg.toy import bundled_toy_dir


@pytest.fixture(scope="session")
def toy_raw():
    return load_dataset_dir(bundled_toy_dir())


@pytest.fixture(scope="session")
def toy_graph(toy_raw):
    return add_inverse_triples(toy_raw)


@pytest.fixture(scope="session")
def toy_index(toy_graph):
    return build_neighbor_index(toy_graph)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_dump(root, entities, relations, splits):
    """Write a TSV dump; ``entities`` rows are (id, name[, desc])."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "entities.tsv").write_text("".join("\t".join(e) + "\n" for e in entities))
    (root / "relations.tsv").write_text("".join("\t".join(r) + "\n" for r in relations))
    for name, rows in splits.items():
        (root / f"{name}.tsv").write_text("".join("\t".join(t) + "\n" for t in rows))
    return root


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
