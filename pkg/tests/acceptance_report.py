"""Pass/fail lines collected by the acceptance tests.

pytest captures test output at the file-descriptor level, so printing
from inside a test never reaches the run log directly.  The tests record
their lines here and a terminal-summary hook in conftest.py replays them
after capture ends, one line per criterion, pass or fail.
"""

LINES = []


def report(n, ok, detail):
    line = f"ACCEPTANCE {n:2d}: {'PASS' if ok else 'FAIL'}: {detail}"
    print(line, flush=True)  # shows in the captured-stdout section on failure
    LINES.append(line)
    assert ok, line
