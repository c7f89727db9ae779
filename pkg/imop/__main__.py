from imop.cli import main

raise SystemExit(main())
