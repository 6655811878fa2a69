# src/ package - the optimal transport solvers, reductions and command line
