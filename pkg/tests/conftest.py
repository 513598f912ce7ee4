import itertools
from pathlib import Path

import numpy as np
import pytest
import yaml

from pii.data_model import Dataset, save_dataset
from pii.identification import tables_from_model

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def enumerated_tables():
    """|U| = 2, |X| = 2, two binary controls, binary remaining outcome."""
    f_u = np.array([0.4, 0.6])
    f_x_u = np.array([[0.7, 0.2], [0.3, 0.8]])
    p1, p2 = np.array([0.2, 0.7]), np.array([0.6, 0.1])
    f_c_u = np.array([[(p1[u] if a else 1 - p1[u]) * (p2[u] if b else 1 - p2[u]) for u in range(2)]
                      for a, b in itertools.product((0, 1), repeat=2)])
    f_r_xu = np.array([[[0.9, 0.5], [0.6, 0.2]], [[0.1, 0.5], [0.4, 0.8]]])
    tables = tables_from_model(f_u, f_x_u, f_c_u, f_r_xu, supp_yc=["00", "01", "10", "11"])
    return tables, (f_u, f_x_u, f_c_u, f_r_xu)


def write_yaml(path: Path, obj) -> Path:
    path.write_text(yaml.safe_dump(obj, sort_keys=False))
    return path


@pytest.fixture
def cli_workspace(tmp_path):
    """Toy data, tables and one config per subcommand."""
    rng = np.random.default_rng(0)
    n = 50
    u = rng.normal(size=(n, 2))
    x = u @ np.array([0.5, -0.5]) + rng.normal(size=n)
    y = u @ rng.uniform(-1, 1, (2, 10))
    y[:, 6:] += np.outer(x, np.ones(4))
    y += rng.normal(size=y.shape)
    save_dataset(Dataset(x, y, (0, 1, 2, 3)), tmp_path / "x.csv", tmp_path / "y.csv",
                 tmp_path / "controls.txt")
    (tmp_path / "truth.csv").write_text("nonnull\n" + "0\n0\n" + "1\n" * 4)
    enumerated_tables()[0].save(tmp_path / "tables.json")
    data = {"x": "x.csv", "y": "y.csv", "controls": "controls.txt"}
    cfgs = {
        "simulate": {"simulation": {"n": 120, "p": 20, "r": 2, "n_controls": 8,
                                    "link": "identity", "replications": 2,
                                    "methods": ["glm_naive", "pii_true_u", "pii_est_u"],
                                    "embed": {"method": "pca", "rank": 2}},
                     "seed": 5},
        "embed": {"data": data, "embed": {"method": "pca", "rank": 2}},
        "fit": {"data": data, "embed": {"method": "ruv", "rank": 2},
                "options": {"link": "identity", "n_folds": 3,
                            "y_learner": {"kind": "random_forest", "n_trees": 5, "max_depth": 3}}},
        "identify": {"tables": "tables.json"},
        "diagnose": {"kind": "fwl", "instance": {"seed": 3, "d": 2}},
    }
    paths = {k: write_yaml(tmp_path / f"{k}.yaml", v) for k, v in cfgs.items()}
    return tmp_path, paths
