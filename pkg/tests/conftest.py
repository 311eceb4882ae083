import contextlib

import pytest

_LINES: list[str] = []


class _Outcome:
    def __init__(self):
        self.ok = False
        self.detail = ""


@pytest.fixture
def criterion():
    """``with criterion("name") as c: ... c.ok = ...; c.detail = ...``

    Prints (and collects for the summary) one PASS/FAIL line, then asserts.
    """

    @contextlib.contextmanager
    def run(name):
        c = _Outcome()
        try:
            yield c
        except Exception as e:
            _emit(name, False, f"{type(e).__name__}: {e}")
            raise
        _emit(name, c.ok, c.detail)
        assert c.ok, f"{name}: {c.detail}"

    return run


def _emit(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    _LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
