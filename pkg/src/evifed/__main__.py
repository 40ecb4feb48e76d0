import sys

from evifed.cli import main

sys.exit(main())
