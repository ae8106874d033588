"""Module entry point: `python -m emograce`."""
import sys

from .cli import main

sys.exit(main())
