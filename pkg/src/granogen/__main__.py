import sys

from granogen.cli import main

sys.exit(main())
