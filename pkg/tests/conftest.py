import sys
from pathlib import Path

import hypothesis

sys.path.insert(0, str(Path(__file__).parent))

hypothesis.settings.register_profile("ci", deadline=None, derandomize=True)
hypothesis.settings.load_profile("ci")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in mod.TITLES.items():
        entry = mod.RESULTS.get(n)
        status = "NOT RUN" if entry is None else ("PASS" if entry["ok"] else "FAIL")
        notes = "; ".join(entry["notes"]) if entry else ""
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {title}" + (f" ({notes})" if notes else ""))
