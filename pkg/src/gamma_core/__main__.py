import sys

from gamma_core.cli import main

sys.exit(main())
