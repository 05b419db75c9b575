import sys

from scene4d.cli import main

sys.exit(main())
