import sys

from fluxcal.cli import main

sys.exit(main())
