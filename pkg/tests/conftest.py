import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def acceptance(request):
    """Registry of acceptance verdicts, printed in the terminal summary."""
    if not hasattr(request.config, "_acceptance"):
        request.config._acceptance = {}
    return request.config._acceptance


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_acceptance", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title, detail, seconds = results[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}  [{detail}; {seconds:.1f}s]")
