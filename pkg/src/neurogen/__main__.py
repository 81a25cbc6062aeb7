import sys

from neurogen.cli import main

sys.exit(main())
