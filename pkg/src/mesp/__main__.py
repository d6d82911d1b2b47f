import sys

from mesp.cli import main

sys.exit(main())
