"""Corpus programs shipped with the virtual machine."""

from pathlib import Path
from typing import Union

from app.frontend import SourceProgram

CORPUS_DIR = Path(__file__).resolve().parent


def program_names() -> list[str]:
    """Names of the shipped programs, without the `.js` suffix."""
    return sorted(path.stem for path in CORPUS_DIR.glob("*.js"))


def load(name_or_path: Union[str, Path]) -> SourceProgram:
    """Load a shipped program by name, or any program by path.

    Raises:
        FileNotFoundError: when neither a corpus entry nor a file exists.
    """
    path = Path(name_or_path)
    if not path.exists():
        path = CORPUS_DIR / f"{Path(name_or_path).stem}.js"
    return SourceProgram.from_path(path)


def program_label(name_or_path: Union[str, Path]) -> str:
    return Path(name_or_path).stem
