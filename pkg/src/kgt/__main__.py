import sys

from kgt.cli import main

sys.exit(main())
