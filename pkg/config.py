from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Any


class Settings(BaseSettings):
    """
    Manages application settings: artifact locations, reproducibility, solver
    tolerances and logging. Every field can be overridden with an ICM_-prefixed
    environment variable or a .env file.
    """
    # ICM_* variables and .env entries; unrelated variables are ignored.
    model_config = SettingsConfigDict(env_file=".env", env_prefix="ICM_", extra="ignore")

    DATA_ROOT: str = "data"
    OUTPUT_DIR: str = "runs"
    SEED: int = 0
    THREADS: int = 1
    LOG_LEVEL: str = "INFO"

    # Newton-Raphson forward solver
    SOLVER_REL_TOL: float = 1e-10
    SOLVER_MAX_ITERATIONS: int = 50
    LINE_SEARCH_HALVINGS: int = 20
    LOAD_BISECTIONS: int = 8

    # cmd_datagen exits with code 3 above this failed-solve fraction
    DATASET_FAILURE_THRESHOLD: float = 0.2

    # Query rows per attention chunk when evaluating large contexts
    ATTENTION_CHUNK: int = 1024

    # Range checks after parsing.
    def model_post_init(self, __context: Any) -> None:
        if not 0 <= self.SEED < 2**64:
            raise ValueError("ICM_SEED must be a 64-bit unsigned value.")
        if self.THREADS < 1:
            raise ValueError("ICM_THREADS must be at least 1.")
        if self.SOLVER_REL_TOL <= 0 or self.SOLVER_MAX_ITERATIONS < 1:
            raise ValueError("Solver tolerance must be positive and the iteration cap at least 1.")
        if not 0.0 <= self.DATASET_FAILURE_THRESHOLD <= 1.0:
            raise ValueError("ICM_DATASET_FAILURE_THRESHOLD must lie in [0, 1].")

        # Accept lower-case level names from the environment
        self.LOG_LEVEL = self.LOG_LEVEL.upper()


settings = Settings()
