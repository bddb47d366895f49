import sys

from jacreg.cli import main

sys.exit(main())
