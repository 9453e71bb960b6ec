"""Run the command line with ``python3 -m gclab``."""

import sys

from .cli import main

sys.exit(main())
