import sys

from margquad.cli import main

sys.exit(main())
