import sys

from cnsc.cli import main

sys.exit(main())
