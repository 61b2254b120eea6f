class ContractError(ValueError):
    """An operation was called with inputs that violate its preconditions."""


class ConfigError(ValueError):
    """A configuration or cohort cannot drive the requested pipeline."""
