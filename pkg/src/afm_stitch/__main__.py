"""Entry point for running afm-stitch as a module.

This allows the CLI to be run with:
    python -m afm_stitch
"""

from afm_stitch.cli import main

if __name__ == "__main__":
    main()
