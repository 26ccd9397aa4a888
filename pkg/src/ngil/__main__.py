from ngil.cli import main

raise SystemExit(main())
