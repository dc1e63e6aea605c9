import sys

from kvshield.cli import main

sys.exit(main())
