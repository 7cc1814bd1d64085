from aqora.cli import main
import sys

sys.exit(main())
