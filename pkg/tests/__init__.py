# Make tests a package to ensure reliable relative imports during discovery.
