import sys

from smarc.main import main

sys.exit(main())
