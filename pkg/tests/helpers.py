from pathlib import Path

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

# criterion number -> (passed, detail), filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
# criterion number -> list of (argv, output bytes) from the first run, for the determinism check
ACCEPTANCE_OUTPUTS: dict[int, list[tuple[list[str], bytes]]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)
