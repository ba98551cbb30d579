"""Regenerate the --help golden files under tests/golden/."""

import contextlib
import io
from pathlib import Path

from ldru.cli import COMMANDS, main

GOLDEN = Path(__file__).resolve().parent.parent / "tests" / "golden"


def help_output(argv: list[str]) -> str:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf), contextlib.suppress(SystemExit):
        main(argv)
    return buf.getvalue()


if __name__ == "__main__":
    GOLDEN.mkdir(parents=True, exist_ok=True)
    (GOLDEN / "ldru.txt").write_text(help_output(["--help"]))
    for name in COMMANDS:
        (GOLDEN / f"{name}.txt").write_text(help_output([name, "--help"]))
