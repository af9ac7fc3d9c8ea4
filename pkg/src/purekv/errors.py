"""Exception types shared across the package.

Configuration problems (bad shapes, invalid layer indices, malformed config
files) raise ConfigurationError and map to CLI exit code 1. Everything else
raised during a run maps to exit code 2.
"""


class ConfigurationError(ValueError):
    """Invalid configuration: bad dimensions, layer indices, or config files."""
