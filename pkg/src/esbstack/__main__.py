import sys

from esbstack.cli import main

sys.exit(main())
