import json
from pathlib import Path

import pytest

from coopeig import cli

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# acceptance verdicts, printed in the terminal summary so they survive output capture
VERDICTS: dict[int, tuple[bool, str]] = {}


class CliRuns:
    """Runs each (config, threads, seed) once per session and caches the result."""

    def __init__(self, root: Path):
        self.root = root
        self.cache = {}

    def __call__(self, name: str, threads: int = 1, seed: int | None = None, tag: str = ""):
        key = (name, threads, seed, tag)
        if key not in self.cache:
            out = self.root / f"{name}_t{threads}_s{seed}{tag}"
            code = cli.run(CONFIGS / f"{name}.json", out, threads=threads, seed=seed)
            rep = json.loads((out / "report.json").read_text()) if (out / "report.json").exists() else None
            self.cache[key] = (code, out, rep)
        return self.cache[key]


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    return CliRuns(tmp_path_factory.mktemp("cli"))


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
