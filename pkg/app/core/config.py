from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    PROJECT_NAME: str = "Evidenced"
    API_V1_STR: str = "/api/v1"

    # CORS
    CORS_ORIGINS: list[str] = ["http://localhost:3000"]

    LOG_LEVEL: str = "INFO"

    # Master seed fallback when --seed is not given
    EVIDENCED_SEED: int | None = None

    # Estimators
    DEFAULT_K_GRID: str = "1e-10:1e-2:log"
    DEFAULT_BOOTSTRAP: int = 1000
    DEFAULT_REPLICATES: int = 1
    DEFAULT_JOBS: int = 1

    # Sampler
    DEFAULT_DRAWS: int = 5000
    DEFAULT_BURN_IN: int = 5000
    DEFAULT_THIN: int = 5
    TARGET_ACCEPTANCE: float = 0.3

    # Priors (rates of the exponential priors)
    BRANCH_LENGTH_RATE: float = 10.0
    ALPHA_RATE: float = 1.0
    GAMMA_CATEGORIES: int = 4

    # Validation suite
    VALIDATE_DRAWS: int = 100_000

    # HTTP uploads
    MAX_UPLOAD_BYTES: int = 200 * 1024 * 1024

    model_config = SettingsConfigDict(
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )


settings = Settings()
