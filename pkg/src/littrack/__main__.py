"""Allow `python -m littrack ...`."""

import sys

from .cli import main

sys.exit(main())
