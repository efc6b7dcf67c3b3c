import hashlib
import re
from pathlib import Path

import pytest

import demorefine
from demorefine import cli, harness

SMALL_CONFIG = """\
seed: 7
tasks: [pick_place, reach]
episodes: 3
seeds: 2
r_grid: [0.0, 0.5, 1.0]
probe_episodes: 2
data:
  episodes: 6
policy:
  iters: 40
  hidden: [32, 32]
  embed_dim: 8
  batch_size: 32
"""


@pytest.fixture(scope="session")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.yaml"
    path.write_text(SMALL_CONFIG)
    return path


@pytest.fixture(scope="session")
def small_run(tmp_path_factory, small_config):
    """Output root after gen-data, train and demo under the small config."""
    out = tmp_path_factory.mktemp("run")
    for cmd in ("gen-data", "train", "demo"):
        assert cli.main([cmd, "--config", str(small_config), "--out", str(out)]) == 0
    return out


# -- acceptance reporting ---------------------------------------------------------

ACCEPTANCE_RESULTS: dict = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        details = "; ".join(v for k, v in report.user_properties if k == "detail")
        ACCEPTANCE_RESULTS[name] = ("PASS" if report.passed else "FAIL", details)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (verdict, details) in sorted(ACCEPTANCE_RESULTS.items(),
                                           key=lambda kv: (_criterion_number(kv[0]), kv[0])):
        terminalreporter.write_line(f"{verdict}  {name}" + (f"  [{details}]" if details else ""))


def _criterion_number(name: str) -> int:
    m = re.search(r"criterion(\d+)", name)
    return int(m.group(1)) if m else 0


# -- default benchmark artifacts ---------------------------------------------------

def _source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(demorefine.__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def default_run(request):
    """gen-data, train and demo under the default config.

    Cached in the pytest cache directory, keyed on the package source, since
    training the default policy takes minutes.
    """
    out = request.config.cache.mkdir(f"demorefine-default-{_source_digest()}")
    cfg = harness.load_config()
    try:
        harness.check_artifacts(cfg, out)
    except (FileNotFoundError, harness.ArtifactMismatch):
        for cmd in ("gen-data", "train", "demo"):
            assert cli.main([cmd, "--out", str(out)]) == 0
    return out
