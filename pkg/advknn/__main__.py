import sys

from advknn.main import main

sys.exit(main())
