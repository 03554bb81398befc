import sys

from forgetd.cli import main

sys.exit(main())
