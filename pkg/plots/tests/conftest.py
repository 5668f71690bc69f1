"""Fixtures for the plotting tests.

Report files are produced by invoking the solver package's command line in
a subprocess; the plotting side must only ever see the CSV/JSON-lines
contract, so the tests build their inputs the same way a user would.
"""

import subprocess
import sys

import pytest

ACCEPTANCE_LINES = []

SWEEP_TOML = """
seed = 5
out_dir = "{out}"

[grid]
T = 1.0
n_steps = 8

[model]
s0 = 1.0
a = 0.03
b = 0.2
r = 0.01
gamma_tilde = 0.3

[model.jump]
density = "power_law"
alpha = 1.5
g = "linear"

[claim]
name = "call"
strike = 1.0

[paths]
n_paths = 600

[sweep]
tag = "TruncateAddB"
epsilons = [0.4, 0.3, 0.2, 0.1, 0.05]
"""

# every atom sits above every truncation level, so the variants coincide
# with the original model and all distances are exactly zero
ZERO_TOML = """
seed = 3
out_dir = "{out}"

[grid]
T = 1.0
n_steps = 6

[model]
s0 = 1.0
a = 0.05
b = 0.2
r = 0.0
gamma_tilde = 0.5

[model.jump]
atoms = [[-0.3, 1.0], [0.5, 0.5]]

[claim]
name = "call"
strike = 1.0

[paths]
n_paths = 400

[sweep]
tag = "TruncateAddB"
epsilons = [0.28, 0.26, 0.24, 0.22]
"""


@pytest.fixture
def record():
    def _record(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return _record


def _run_sweep(template, out_dir):
    cfg = out_dir / "config.toml"
    cfg.write_text(template.format(out=out_dir.as_posix()))
    proc = subprocess.run(
        [sys.executable, "-m", "bsdehedge.cli", "sweep", str(cfg)],
        capture_output=True, text=True,
    )
    # exit 4 is a certificate verdict on a fully written report, which is
    # all the plotting side cares about
    assert proc.returncode in (0, 4), proc.stderr
    csv_path = out_dir / "robustness.csv"
    assert csv_path.exists() and (out_dir / "robustness.jsonl").exists()
    return csv_path


@pytest.fixture(scope="session")
def sweep_csv(tmp_path_factory):
    return _run_sweep(SWEEP_TOML, tmp_path_factory.mktemp("sweep"))


@pytest.fixture(scope="session")
def zero_csv(tmp_path_factory):
    return _run_sweep(ZERO_TOML, tmp_path_factory.mktemp("zero"))


@pytest.fixture
def drop_columns():
    def _drop(csv_text, names):
        out, keep = [], None
        for line in csv_text.splitlines():
            if line.startswith("#"):
                out.append(line)
                continue
            cells = line.split(",")
            if keep is None:
                keep = [i for i, c in enumerate(cells) if c not in names]
            out.append(",".join(cells[i] for i in keep))
        return "\n".join(out) + "\n"

    return _drop


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria (plots)")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
