import sys

from csd.cli import main

sys.exit(main())
