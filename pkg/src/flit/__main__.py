import sys

from flit.cli import main

sys.exit(main())
