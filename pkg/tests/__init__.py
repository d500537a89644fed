"""Repository-level tests: imports, command line and end-to-end acceptance."""
