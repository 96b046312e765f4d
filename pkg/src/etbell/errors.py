"""Exception hierarchy shared across the toolkit."""


class EtbellError(Exception):
    """Base class for all toolkit errors."""


class ContractViolation(EtbellError):
    """An argument violated a documented precondition."""


class ConfigurationError(EtbellError):
    """A run configuration is inconsistent or physically unresolvable."""


class StrategyGeometryError(EtbellError):
    """A hidden-variable strategy is incompatible with the requested geometry."""


class EstimationError(EtbellError):
    """An estimator was asked to work with insufficient data."""


class FringeFitError(EstimationError):
    """The fringe least-squares fit did not converge."""


class SyncRecoveryError(EtbellError):
    """No significant cross-correlation peak; clock offset not recoverable."""


class ReportError(EtbellError):
    """A run directory is missing artifacts required for reporting."""
