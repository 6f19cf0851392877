"""Allow ``python -m pyv2xbench``."""

import sys

from .cli import main

sys.exit(main())
