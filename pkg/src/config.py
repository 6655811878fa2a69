"""
Solver configuration loaded from environment variables.

Uses pydantic-settings to define typed configuration that automatically reads
from environment variables. Every knob that is a run policy (log level,
default accuracy, iteration caps, benchmark parallelism) lives here; numeric
tolerances that the invariants are stated against live in `src.core` as
constants because they are part of the solver's contract, not a policy.

Locally, you can set them via environment variables or a .env file:

    EXPSINKHORN_LOG_LEVEL=debug
    EXPSINKHORN_DEFAULT_EPSILON=1e-6
    EXPSINKHORN_CAP_FACTOR=20
"""

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """
    Solver configuration with environment variable bindings.

    Each field maps to an environment variable with the EXPSINKHORN_ prefix.
    For example, `default_epsilon` reads from EXPSINKHORN_DEFAULT_EPSILON.
    """

    # --- Logging ---

    # Root log level used by the CLI. Library code only creates loggers.
    log_level: str = "warning"

    # --- Solver defaults ---

    # Additive error target (original units) when --epsilon is not given.
    default_epsilon: float = 1e-3

    # The default safety cap on ExpSinkhorn steps is this multiple of the
    # explicit iteration bound (see src.sinkhorn.iteration_bound).
    # Exceeding it raises IterationCapExceeded instead of truncating.
    cap_factor: float = 10.0

    # Fixed-eta Sinkhorn has no useful closed-form bound at small epsilon,
    # so it gets a flat cap.
    plain_iteration_cap: int = 200_000

    # --- Benchmark ---

    # Worker threads for benchmark cells. Each cell is single-threaded.
    bench_workers: int = 4

    model_config = {
        "env_prefix": "EXPSINKHORN_",
        "env_file": ".env",
        "env_file_encoding": "utf-8",
    }


# Singleton instance: import this from other modules.
settings = Settings()
