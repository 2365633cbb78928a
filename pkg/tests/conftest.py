"""Shared pytest plumbing: surfaces the ship-gate verdict lines.

The acceptance tests append one `[C#] PASS/FAIL ...` line each to
`ship_gate_lines`; printing them from a terminal-summary hook keeps them
visible under pytest's output capture.
"""

ship_gate_lines: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ship_gate_lines:
        terminalreporter.section("ship gate")
        for line in ship_gate_lines:
            terminalreporter.write_line(line)
