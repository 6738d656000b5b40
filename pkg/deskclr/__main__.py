import sys

from deskclr.main import main

sys.exit(main())
