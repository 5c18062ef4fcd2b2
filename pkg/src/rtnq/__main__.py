import sys

from rtnq.cli import main

sys.exit(main())
