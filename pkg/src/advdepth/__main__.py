import sys

from advdepth.cli import main

sys.exit(main())
