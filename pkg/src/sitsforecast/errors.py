"""Exception hierarchy shared across the package."""


class SitsForecastError(Exception):
    """Base class for all package errors."""


class DimensionError(SitsForecastError, ValueError):
    pass


class ConfigurationError(SitsForecastError, ValueError):
    pass


class DomainError(SitsForecastError, ValueError):
    pass


class ArityError(SitsForecastError, ValueError):
    pass


class ValidationError(SitsForecastError, ValueError):
    pass


class StateError(SitsForecastError, RuntimeError):
    pass


class OracleError(SitsForecastError, RuntimeError):
    """Raised when a verification oracle cannot produce a trustworthy answer."""
