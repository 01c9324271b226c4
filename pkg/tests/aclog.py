"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
LINES = {}


def record(name, ok, detail=""):
    LINES[name] = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
    return ok
