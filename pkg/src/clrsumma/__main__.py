import sys

from clrsumma.cli import main

sys.exit(main())
