"""Collects the acceptance-criterion outcomes and prints one line per
criterion at the end of the run."""

_CRITERIA = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    key = props["criterion"]
    if report.when == "call" or report.failed:
        prev = _CRITERIA.get(key)
        failed = report.failed or (prev is not None and prev[0] == "FAIL")
        detail = props.get("detail", "") or (prev[1] if prev else "")
        _CRITERIA[key] = ("FAIL" if failed else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (len(k), k)):
        status, detail = _CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {status}  {detail}".rstrip())
