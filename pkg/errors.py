"""
Error types shared by the network calculus, the Markov drivers and the CLI.

Library code raises these; only `neural_stopping.main` turns them into exit codes.
"""


class StoppingError(Exception):
    """Base class for every error raised by this package"""


class InputError(StoppingError, ValueError):
    """A precondition, dimension or parameter range was violated"""


class DomainError(StoppingError, ValueError):
    """A requested quantity diverges or is not finite"""


class ResourceError(StoppingError, RuntimeError):
    """A tractability guard was exceeded"""


class ConfigError(InputError):
    """Malformed experiment configuration"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
