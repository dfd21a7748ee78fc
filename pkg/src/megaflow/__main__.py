import sys

from megaflow.cli import main

sys.exit(main())
