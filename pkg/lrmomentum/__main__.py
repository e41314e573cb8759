import sys

from lrmomentum.cli import main

sys.exit(main())
