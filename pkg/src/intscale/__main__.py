import sys

from intscale.cli import main

sys.exit(main())
