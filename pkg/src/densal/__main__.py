import sys

from densal.cli import main

sys.exit(main())
