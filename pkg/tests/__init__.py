# Tests for the PDE Workbench
