"""Exception types shared across the package.

Each error carries a short machine-readable ``code`` which the command line
front end prints as a prefix (``E_SHAPE: ...``).
"""


class AsymlossError(Exception):
    code = "E_GENERIC"


class ShapeError(AsymlossError, ValueError):
    code = "E_SHAPE"


class DomainError(AsymlossError, ValueError):
    code = "E_DOMAIN"


class ContractError(AsymlossError, ValueError):
    code = "E_CONTRACT"


class ConfigError(AsymlossError, ValueError):
    code = "E_CONFIG"


class TrainingDiverged(AsymlossError, RuntimeError):
    code = "E_DIVERGED"

    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"non-finite training loss {value!r} at epoch {epoch}, batch {batch}")


class FingerprintMismatch(AsymlossError, ValueError):
    code = "E_FINGERPRINT"
