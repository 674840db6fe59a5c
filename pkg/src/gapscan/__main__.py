"""Allow ``python -m gapscan`` as an alias for the ``gapscan`` script."""

import sys

from .cli import main

sys.exit(main())
