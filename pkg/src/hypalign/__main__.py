import sys

from hypalign.cli import main

sys.exit(main())
