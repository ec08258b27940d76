"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

RESULTS = {}


def record(number, passed, detail):
    RESULTS[number] = (passed, detail)
    line = format_line(number)
    print(line)
    return passed


def format_line(number):
    passed, detail = RESULTS[number]
    return f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def lines():
    return [format_line(k) for k in sorted(RESULTS)]
