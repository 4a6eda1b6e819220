"""Allow ``python3 -m tbasim``."""

import sys

from .cli import main

sys.exit(main())
