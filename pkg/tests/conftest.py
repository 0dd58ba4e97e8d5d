"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_setup(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        item.user_properties.append(("criterion", m.args[0]))
        item.user_properties.append(("title", m.args[1]))


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props or not (rep.when == "call" or outcome == "error"):
                continue
            n = props["criterion"]
            ok = outcome == "passed" and lines.get(n, (True,))[0]
            lines[n] = (ok, f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {props['title']}  [{props.get('detail', '')}]")
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n][1])
