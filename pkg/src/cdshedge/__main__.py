from .scenario_cli import main

raise SystemExit(main())
