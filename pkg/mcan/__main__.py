import sys
from mcan.cli import main

sys.exit(main())
