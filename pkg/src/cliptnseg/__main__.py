import sys

from cliptnseg.cli import main

sys.exit(main())
