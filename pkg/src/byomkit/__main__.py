import sys

from byomkit.cli import main

sys.exit(main())
