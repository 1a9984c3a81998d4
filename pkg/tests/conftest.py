import pytest

# criterion number -> (title, list of outcomes)
_ACCEPTANCE: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or not mark.args:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        num, title = mark.args[0], mark.args[1]
        _ACCEPTANCE.setdefault(num, [title, []])[1].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        title, results = _ACCEPTANCE[num]
        verdict = "PASS" if results and all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d} {verdict}  {title}")
