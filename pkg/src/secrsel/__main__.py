"""Entry point for ``python -m secrsel``."""

import sys

from .cli import main

sys.exit(main())
