import sys

from rigidgraph.cli import main

sys.exit(main())
