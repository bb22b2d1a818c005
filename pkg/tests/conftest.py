import pytest

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log():
    def log(name, passed, runtime, limit, detail):
        ok = passed and runtime < limit
        line = (f"{'PASS' if ok else 'FAIL'}  {name:<26} {detail}; "
                f"runtime {runtime:.1f} s (limit {limit:g} s)")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return log
