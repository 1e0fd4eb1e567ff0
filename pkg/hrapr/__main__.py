import sys

from hrapr.cli import main

sys.exit(main())
