"""Entry point for running as module."""

from avs.cli import app

if __name__ == "__main__":
    app()
