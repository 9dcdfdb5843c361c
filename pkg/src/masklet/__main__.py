"""
masklet command-line interface entry point.

Allows the package to be executed as a module with `python -m masklet`.
"""

from .cli import app


if __name__ == "__main__":
    app()
