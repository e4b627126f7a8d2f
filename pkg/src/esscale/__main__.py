import sys

from esscale.cli import main

sys.exit(main())
