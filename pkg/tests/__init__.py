# tests/ package - unit and property tests for every solver module
