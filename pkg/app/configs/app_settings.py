from pydantic_settings import BaseSettings
from typing import Literal

# BaseSettings from pydantic-settings pulls values from the process environment first, then from the .env file,
# and finally falls back to the defaults below. Every value has a default so a bare checkout runs without a .env file.


class Settings(BaseSettings):
    # World / transport
    WORLD_SIZE: int = 4
    TRANSPORT_BACKEND: Literal["simulated", "socket"] = "simulated"
    WATCHDOG_TIMEOUT_SECONDS: float = 30.0
    SOCKET_HOST: str = "127.0.0.1"

    # alpha-beta cost model (unit-free, only ratios matter)
    COST_ALPHA: float = 1000.0
    COST_BETA_D: float = 1.0
    COST_BETA_S: float = 2.0

    # Collective tuning
    SMALL_MESSAGE_CUTOFF_BYTES: int = 64 * 1024
    INDEX_BYTES: int = 4
    THRESHOLD_SCALE: float = 1.0

    # Bucket sizes
    QUANT_BUCKET_SIZE: int = 1024
    TOPK_BUCKET_SIZE: int = 512

    # Logging
    LOG_LEVEL: str = "INFO"

    # API Settings
    API_V1_STR: str = "/api/v1"

    class Config:
        # priority handling, the order is:
        # 1. System environment variables (highest priority)
        # 2. .env file (if it exists)
        # 3. Default values in the Settings class (lowest priority)
        env_file = ".env"
        case_sensitive = True


# imported modules are cached in sys.modules, so Settings() is only built once per process
settings = Settings()
