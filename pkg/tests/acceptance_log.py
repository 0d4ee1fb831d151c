"""PASS/FAIL lines recorded by test_acceptance.py and echoed in the pytest summary."""

LINES: list[str] = []
