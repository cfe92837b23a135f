import sys

from drolt.cli import main

sys.exit(main())
