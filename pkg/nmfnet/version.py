import subprocess
from pathlib import Path

__version__ = "0.1.0"


def describe():
    """git-describe-style version string, falling back to the package version"""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        )
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"
    tag = out.stdout.strip()
    return tag if tag else f"v{__version__}"
