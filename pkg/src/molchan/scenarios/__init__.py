"""Bundled scenario configurations (executable schema examples)."""

from pathlib import Path

_HERE = Path(__file__).parent


def names() -> list[str]:
    return sorted(p.stem for p in _HERE.glob("*.yaml"))


def path(name: str) -> Path:
    p = _HERE / f"{name}.yaml"
    if not p.exists():
        raise KeyError(f"no bundled scenario {name!r}; have {names()}")
    return p
