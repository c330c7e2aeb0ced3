"""
Entry point for the 4D driving-scene engine CLI.

    python drive4d.py --help
"""
from src.simcli import cli

if __name__ == "__main__":
    cli()
