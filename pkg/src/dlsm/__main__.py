import sys

from dlsm.cli import main

sys.exit(main())
