import sys

from subpopdro.cli import main

sys.exit(main())
