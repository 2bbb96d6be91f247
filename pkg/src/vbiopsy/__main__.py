import sys

from vbiopsy.cli import main

sys.exit(main())
