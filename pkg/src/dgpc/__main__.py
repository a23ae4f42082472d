from dgpc.cli import main
import sys

sys.exit(main())
